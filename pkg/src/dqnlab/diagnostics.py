"""Computable versions of the objects in the ODE convergence argument.

Iterates between checkpoints are rebuilt on demand by re-running the logged
updates (:func:`iter_thetas`); the replay is bit-exact, so every diagnostic
sees exactly the ``theta_n`` the trainer used.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .envs import Mdp, OptimalSolution, expected_max_q
from .errors import DivergenceError, InputError, PreconditionError
from .measure import OccupationMeasure, TimeAxis, step_measure
from .network import Topology, forward, q_gradient, q_table, q_values
from .trainer import TrainRecord, expected_semi_gradient, replay_update

# -- iterate reconstruction ------------------------------------------------------


def iter_thetas(record: TrainRecord, checkpoints: dict, topology: Topology, mdp: Mdp,
                start: int = 0, stop: int | None = None) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(n, theta_n)`` for ``start <= n <= stop``.

    Starts from the latest checkpoint at or before ``start`` and replays the
    logged updates; any checkpoint passed on the way must match bit-for-bit.
    """
    stop = len(record) if stop is None else stop
    if not 0 <= start <= stop <= len(record):
        raise InputError(f"step range [{start}, {stop}] outside the record of length {len(record)}")
    usable = [s for s in checkpoints if s <= start]
    if not usable:
        raise PreconditionError(f"no checkpoint at or before step {start}")
    n = max(usable)
    theta = np.array(checkpoints[n], dtype=float)
    while True:
        if n in checkpoints and not np.array_equal(checkpoints[n], theta):
            raise PreconditionError(f"replayed iterate disagrees with checkpoint {n}")
        if n >= start:
            yield n, theta
        if n >= stop:
            return
        theta = replay_update(topology, theta, record, n, mdp)
        n += 1


def theta_sequence(record, checkpoints, topology, mdp, start=0, stop=None) -> np.ndarray:
    return np.array([th for _, th in iter_thetas(record, checkpoints, topology, mdp, start, stop)])


# -- martingale traces -----------------------------------------------------------


def psi_term(topology: Topology, theta: np.ndarray, mdp: Mdp, x: int, a: int, y: int) -> np.ndarray:
    """``alpha * (max Q(y, .) - E[max Q(x', .) | x, a]) * grad Q(x, a)``."""
    qmax = float(np.max(q_values(topology, theta, mdp.states[y])))
    emax = expected_max_q(mdp, x, a, lambda s: q_values(topology, theta, mdp.states[s]))
    return mdp.discount * (qmax - emax) * q_gradient(topology, theta, mdp.states[x], a)


def psi_conditional_mean(topology: Topology, theta: np.ndarray, mdp: Mdp, x: int, a: int) -> np.ndarray:
    """``sum_y p(y|x,a) psi(y)``: zero by construction, evaluated by enumeration."""
    grad = q_gradient(topology, theta, mdp.states[x], a)
    qmax = {y: float(np.max(q_values(topology, theta, mdp.states[y]))) for y, _ in mdp.row(x, a)}
    emax = sum(p * qmax[y] for y, p in mdp.row(x, a))
    total = np.zeros_like(grad)
    for y, p in mdp.row(x, a):
        total += p * (mdp.discount * (qmax[y] - emax) * grad)
    return total


@dataclass
class MartingaleTrace:
    """Increments ``gamma(m) * noise_m`` and their running sums.

    ``partial_sums[n]`` is the sum of the first ``n`` increments, so it has
    one more entry than ``increments`` and starts at zero.
    """

    kind: str                      # "noise" (M_n) or "test_function" (xi_n)
    increments: np.ndarray         # (N,) or (N, d)
    label: str = ""
    conditional_mean_max: np.ndarray | None = None  # per step, noise kind only
    _sums: np.ndarray | None = field(default=None, init=False, repr=False)

    @property
    def partial_sums(self) -> np.ndarray:
        if self._sums is None:
            inc = self.increments
            zero = np.zeros((1,) + inc.shape[1:])
            self._sums = np.concatenate([zero, np.cumsum(inc, axis=0)]) if len(inc) else zero
        return self._sums

    def _dist(self, a, b):
        d = a - b
        return np.abs(d) if d.ndim == 1 else np.linalg.norm(d, axis=-1)

    def tail_fluctuation(self) -> float:
        """``max_{n >= N/2} |S_n - S_N|`` over the final half."""
        s = self.partial_sums
        half = (len(s) - 1) // 2
        return float(np.max(self._dist(s[half:], s[-1]))) if len(s) > 1 else 0.0

    def full_range(self) -> float:
        """``max_n |S_n|`` for vector traces; ``max S - min S`` for scalar ones."""
        s = self.partial_sums
        if s.ndim == 1:
            return float(s.max() - s.min())
        return float(np.max(np.linalg.norm(s, axis=1)))

    def tail_ratio(self) -> float:
        rng = self.full_range()
        return self.tail_fluctuation() / rng if rng > 0 else 0.0

    def converged(self, threshold: float = 0.1) -> bool:
        return self.tail_ratio() <= threshold

    def summary(self) -> dict:
        d = {"kind": self.kind, "label": self.label, "steps": int(len(self.increments)),
             "tail_fluctuation": self.tail_fluctuation(), "full_range": self.full_range(),
             "tail_ratio": self.tail_ratio()}
        if self.conditional_mean_max is not None:
            d["max_conditional_mean"] = float(np.max(self.conditional_mean_max, initial=0.0))
        return d

    def series(self) -> np.ndarray:
        """``|S_n|`` (vector) or ``S_n`` (scalar) per step, for plotting."""
        s = self.partial_sums
        return s if s.ndim == 1 else np.linalg.norm(s, axis=1)


def martingale_trace(record: TrainRecord, checkpoints: dict, topology: Topology, mdp: Mdp,
                     check_mean: bool = True) -> MartingaleTrace:
    """``M_n = sum_{m<n} gamma(m) psi_m`` along the logged run.

    For replay runs ``psi_m`` is the batch average of the per-transition
    terms.  With ``check_mean`` each step also records the largest component
    of the enumerated conditional mean of ``psi_m``.
    """
    n_steps = len(record)
    inc = np.zeros((n_steps, topology.n_params))
    cmean = np.zeros(n_steps) if check_mean else None
    if n_steps == 0:
        return MartingaleTrace("noise", inc, "M", cmean)
    for n, theta in iter_thetas(record, checkpoints, topology, mdp, 0, n_steps - 1):
        batch = record.batch_at(n) if record.batch is None or record.batch[n] else []
        if not batch:
            continue
        psi = np.zeros(topology.n_params)
        for t in batch:
            psi += psi_term(topology, theta, mdp, t.x, t.a, t.y)
            if check_mean:
                cm = np.max(np.abs(psi_conditional_mean(topology, theta, mdp, t.x, t.a)))
                cmean[n] = max(cmean[n], cm)
        inc[n] = record.step_sizes[n] * (psi / len(batch))
    return MartingaleTrace("noise", inc, "M", cmean)


def test_function_trace(record: TrainRecord, mdp: Mdp, f, label: str = "") -> MartingaleTrace:
    """``xi_n = sum_{m<n} gamma(m) (f(x_{m+1}) - sum_y p(y|x_m,a_m) f(y))``.

    ``f`` is a vector of values over states or a callable on state indices.
    The logged action fixes the kernel row, so no weights are needed.
    """
    values = np.array([f(s) for s in range(mdp.n_states)], dtype=float) if callable(f) else np.asarray(f, float)
    if values.shape != (mdp.n_states,) or not np.all(np.isfinite(values)):
        raise InputError("test function must be finite on every state")
    P = mdp.transition_matrix
    inc = np.zeros(len(record))
    for n in range(len(record)):
        batch = record.batch_at(n) if record.batch is None or record.batch[n] else []
        if not batch:
            continue
        total = 0.0
        for t in batch:
            total += values[t.y] - float(P[t.x, t.a] @ values)
        inc[n] = record.step_sizes[n] * (total / len(batch))
    return MartingaleTrace("test_function", inc, label)


def test_function_bank(mdp: Mdp) -> list[tuple[str, np.ndarray]]:
    """Indicators of every state plus the first two coordinate functions."""
    bank = [(f"indicator_{x}", np.eye(mdp.n_states)[x]) for x in range(mdp.n_states)]
    for k in range(min(2, mdp.state_dim)):
        bank.append((f"coordinate_{k}", mdp.states[:, k].copy()))
    return bank


# -- interpolation and the frozen-measure ODE ----------------------------------------


class Interpolant:
    """Piecewise-linear ``theta_bar(t)`` through ``(t_n, theta_n)``."""

    def __init__(self, times: np.ndarray, thetas: np.ndarray):
        self.times = np.asarray(times, dtype=float)
        self.thetas = np.asarray(thetas, dtype=float)
        if len(self.times) != len(self.thetas) or len(self.times) == 0:
            raise InputError("need one iterate per grid time")

    def __call__(self, t: float) -> np.ndarray:
        if not self.times[0] <= t <= self.times[-1]:
            raise InputError(f"time {t!r} outside [{self.times[0]!r}, {self.times[-1]!r}]")
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        if i >= len(self.times) - 1 or self.times[i] == t:
            return self.thetas[i].copy()
        t0, t1 = self.times[i], self.times[i + 1]
        return self.thetas[i] + ((t - t0) / (t1 - t0)) * (self.thetas[i + 1] - self.thetas[i])


def interpolate_trajectory(thetas: np.ndarray, axis: TimeAxis, start: int = 0) -> Interpolant:
    """``theta_bar`` on ``[t_start, t_{start + len(thetas) - 1}]``."""
    thetas = np.asarray(thetas, dtype=float)
    end = start + len(thetas)
    if start < 0 or end > len(axis.t):
        raise InputError("iterates extend beyond the time axis")
    return Interpolant(axis.t[start:end], thetas)


@dataclass
class GradientFieldEstimate:
    theta: np.ndarray
    measure: OccupationMeasure
    vector: np.ndarray
    norm: float


def averaged_gradient(topology: Topology, theta: np.ndarray, measure: OccupationMeasure,
                      mdp: Mdp) -> GradientFieldEstimate:
    """``sum_{(x,a)} mu(x,a) * expected-target semi-gradient at (x, a)``."""
    if measure.shape != (mdp.n_states, mdp.n_actions):
        raise InputError(f"measure on {measure.shape} does not match the MDP")
    vec = np.zeros(topology.n_params)
    for x, a, w in measure.atoms():
        vec += w * expected_semi_gradient(topology, theta, mdp, x, a)
    return GradientFieldEstimate(theta, measure, vec, float(np.linalg.norm(vec)))


@dataclass
class OdeSolution:
    times: np.ndarray   # relative to the anchor, starting at 0
    thetas: np.ndarray


def _euler(topology, theta, measure, mdp, duration, substeps, guard):
    h = duration / substeps
    out = []
    for _ in range(substeps):
        theta = theta + h * averaged_gradient(topology, theta, measure, mdp).vector
        if not np.all(np.isfinite(theta)) or np.linalg.norm(theta) > guard:
            raise DivergenceError("frozen-measure ODE left the guard ball", -1)
        out.append(theta)
    return out


def integrate_frozen_ode(topology: Topology, theta_start: np.ndarray,
                         pieces: Sequence[tuple[float, OccupationMeasure]], mdp: Mdp,
                         substeps: int = 4, guard: float = 1e6) -> OdeSolution:
    """Explicit Euler for ``dtheta/dt = averaged_gradient(theta, mu(t))``.

    ``pieces`` lists ``(duration, measure)`` segments on which the measure is
    constant; each gets ``substeps`` equal Euler steps, so steps never
    straddle a jump of the measure.
    """
    if substeps < 1:
        raise InputError("substeps must be >= 1")
    theta = np.array(theta_start, dtype=float)
    times, thetas = [0.0], [theta]
    t = 0.0
    for duration, mu in pieces:
        if duration <= 0:
            continue
        path = _euler(topology, thetas[-1], mu, mdp, duration, substeps, guard)
        h = duration / substeps
        times.extend(t + h * (j + 1) for j in range(substeps))
        thetas.extend(path)
        t += duration
    return OdeSolution(np.array(times), np.array(thetas))


def measure_path(record: TrainRecord, mdp: Mdp, anchor: int, horizon: float,
                 axis: TimeAxis | None = None) -> list[tuple[int, float, OccupationMeasure]]:
    """``(step, duration, measure)`` segments covering ``[t_anchor, t_anchor + T]``."""
    axis = axis or TimeAxis.of(record)
    if not 0 <= anchor <= len(record):
        raise InputError(f"anchor {anchor} outside the record")
    t_end = axis.t[anchor] + horizon
    if horizon < 0 or t_end > axis.end:
        raise InputError(f"horizon {horizon!r} from anchor {anchor} runs past the end of the record")
    out = []
    m = anchor
    while m < len(record) and axis.t[m] < t_end:
        dur = min(axis.t[m + 1], t_end) - axis.t[m]
        out.append((m, float(dur), step_measure(record, m, mdp.n_states, mdp.n_actions)))
        m += 1
    return out


@dataclass
class OdeTrackingReport:
    anchor: int
    horizon: float
    substeps: int
    integrator_steps: int
    sup_distance: float
    endpoint_halving_change: float | None = None
    theta_norm: float | None = None
    profile: np.ndarray | None = field(default=None, repr=False)  # (k, 2) rows of (t, distance)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "profile"}


def tracking_error(record: TrainRecord, checkpoints: dict, topology: Topology, mdp: Mdp,
                   anchors: Sequence[int], horizon: float, substeps: int = 4,
                   check_halving: bool = True, guard: float = 1e6) -> list[OdeTrackingReport]:
    """``sup_{t<=T} ||theta_bar(t_n + t) - theta^n(t)||`` for each anchor ``n``.

    Both curves are piecewise linear on the Euler substep grid, so the
    supremum over that grid is the supremum over ``[0, T]``.  With
    ``check_halving`` the ODE endpoint is recomputed with twice the substeps
    and the change is reported.
    """
    axis = TimeAxis.of(record)
    reports = []
    for anchor in anchors:
        path = measure_path(record, mdp, anchor, horizon, axis)
        if not path:
            reports.append(OdeTrackingReport(anchor, horizon, substeps, 0, 0.0, 0.0, None, np.zeros((1, 2))))
            continue
        last = path[-1][0] + 1
        thetas = theta_sequence(record, checkpoints, topology, mdp, anchor, last)
        segments = [(m, dur, mu, float(record.step_sizes[m])) for m, dur, mu in path]
        sup, end, profile = _sup_distance(topology, thetas, segments, mdp, substeps, guard)
        rep = OdeTrackingReport(anchor, horizon, substeps, substeps * len(path), sup,
                                theta_norm=float(np.linalg.norm(thetas[0])), profile=profile)
        if check_halving:
            _, end2, _ = _sup_distance(topology, thetas, segments, mdp, 2 * substeps, guard)
            rep.endpoint_halving_change = float(np.linalg.norm(end2 - end))
        reports.append(rep)
    return reports


def _sup_distance(topology, thetas, segments, mdp, substeps, guard):
    theta_ode = thetas[0].copy()
    sup = 0.0
    t = 0.0
    profile = [(0.0, 0.0)]
    for i, (m, dur, mu, gamma_m) in enumerate(segments):
        h = dur / substeps
        slope = (thetas[i + 1] - thetas[i]) / gamma_m if gamma_m > 0 else 0.0 * thetas[i]
        for j in range(substeps):
            theta_ode = theta_ode + h * averaged_gradient(topology, theta_ode, mu, mdp).vector
            if not np.all(np.isfinite(theta_ode)) or np.linalg.norm(theta_ode) > guard:
                raise DivergenceError("frozen-measure ODE left the guard ball", m)
            bar = thetas[i] + ((j + 1) * h) * slope
            dist = float(np.linalg.norm(bar - theta_ode))
            profile.append((t + (j + 1) * h, dist))
            sup = max(sup, dist)
        t += dur
    return sup, theta_ode, np.array(profile)


# -- undertraining -----------------------------------------------------------------


@dataclass
class RegionReport:
    action: int
    region: list[int]          # states where the action is optimal
    region_mass: float         # mu(S(a) x A)
    pair_mass: float           # mu(S(a) x {a})
    q_error: float             # mean |Q(., a) - Q*(., a)| over S(a); nan if empty
    trapped: bool              # region visited but the optimal pair never taken


@dataclass
class UndertrainingReport:
    regions: list[RegionReport]
    mismatch: list[bool]       # per state: greedy action is not optimal

    @property
    def trapped(self) -> list[RegionReport]:
        return [r for r in self.regions if r.trapped]

    def to_dict(self) -> dict:
        return {"regions": [dict(r.__dict__) for r in self.regions],
                "mismatch": [bool(m) for m in self.mismatch]}


def undertraining_scan(topology: Topology, theta: np.ndarray, measure: OccupationMeasure, mdp: Mdp,
                       oracle: OptimalSolution, opt_tol: float = 1e-9) -> UndertrainingReport:
    """Coverage of each optimal-action region by the (tail) measure.

    A state counts as mismatched when the network's greedy action is more
    than ``opt_tol`` below optimal, so ties in Q* never raise a flag.
    """
    q = q_table(topology, theta, mdp.states)
    greedy = np.argmax(q, axis=1)
    w = measure.weights
    regions = []
    for a in range(mdp.n_actions):
        region = [int(x) for x in np.flatnonzero(oracle.pi_star == a)]
        rm = float(w[region].sum()) if region else 0.0
        pm = float(w[region, a].sum()) if region else 0.0
        err = float(np.mean(np.abs(q[region, a] - oracle.q_star[region, a]))) if region else float("nan")
        regions.append(RegionReport(a, region, rm, pm, err, rm > 0 and pm == 0))
    picked = oracle.q_star[np.arange(mdp.n_states), greedy]
    mismatch = list(picked < oracle.v_star - opt_tol)
    return UndertrainingReport(regions, mismatch)
