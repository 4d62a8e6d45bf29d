"""Occupation measures on the step-size time axis.

Step ``n`` occupies the interval ``[t_n, t_{n+1})`` of length ``gamma(n)``;
on it the measure process is the Dirac mass at ``(x_n, a_n)``, or for replay
runs the uniform measure over the sampled mini-batch.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .envs import FrozenKernel, Mdp, policy_kernel
from .errors import InputError, ValidationError
from .network import Topology, q_table
from .trainer import TrainRecord

NORM_TOL = 1e-12


@dataclass(frozen=True)
class TimeAxis:
    """``t_0 = 0``, ``t_n = sum_{m<n} gamma(m)``; one more entry than steps."""

    t: np.ndarray

    @classmethod
    def from_steps(cls, step_sizes) -> "TimeAxis":
        gammas = np.asarray(step_sizes, dtype=float)
        if np.any(gammas < 0):
            raise ValidationError("step sizes must be nonnegative")
        t = np.concatenate([[0.0], np.cumsum(gammas)])
        t.flags.writeable = False
        return cls(t)

    @classmethod
    def of(cls, record: TrainRecord) -> "TimeAxis":
        return cls.from_steps(record.step_sizes)

    @property
    def n_steps(self) -> int:
        return len(self.t) - 1

    @property
    def end(self) -> float:
        return float(self.t[-1])

    def step_at(self, time: float) -> int:
        """Index ``n`` with ``t_n <= time < t_{n+1}``."""
        if not 0.0 <= time < self.end:
            raise InputError(f"time {time!r} outside [0, {self.end!r})")
        n = int(np.searchsorted(self.t, time, side="right")) - 1
        # zero-length intervals cannot contain a time; skip to the one that does
        while self.t[n + 1] <= time:
            n += 1
        return n

    def first_step_after(self, time: float) -> int:
        """Smallest ``m`` with ``t_m >= time``."""
        return int(np.searchsorted(self.t, time, side="left"))


@dataclass(frozen=True)
class OccupationMeasure:
    """Probability measure on the finite set S x A, stored as a dense table."""

    weights: np.ndarray  # shape (n_states, n_actions)

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 2:
            raise ValidationError("measure weights must be a (states, actions) table")
        if np.any(w < 0) or abs(w.sum() - 1.0) > NORM_TOL:
            raise ValidationError(f"measure weights must be nonnegative and sum to 1 (sum {w.sum()!r})")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_atoms(cls, atoms, n_states: int, n_actions: int) -> "OccupationMeasure":
        w = np.zeros((n_states, n_actions))
        for x, a, mass in atoms:
            if not (0 <= x < n_states and 0 <= a < n_actions):
                raise InputError(f"atom ({x}, {a}) outside the state-action set")
            w[x, a] += mass
        return cls(w)

    @classmethod
    def dirac(cls, x: int, a: int, n_states: int, n_actions: int) -> "OccupationMeasure":
        return cls.from_atoms([(x, a, 1.0)], n_states, n_actions)

    @property
    def shape(self):
        return self.weights.shape

    def atoms(self) -> list[tuple[int, int, float]]:
        return [(int(x), int(a), float(self.weights[x, a])) for x, a in zip(*np.nonzero(self.weights))]

    def marginal(self) -> "MarginalHistogram":
        return MarginalHistogram(self.weights.sum(axis=1))

    def support_size(self) -> int:
        return int(np.count_nonzero(self.weights))

    def entropy(self) -> float:
        """Shannon entropy in nats."""
        w = self.weights[self.weights > 0]
        return float(-(w * np.log(w)).sum())


@dataclass(frozen=True)
class MarginalHistogram:
    mass: np.ndarray

    def __post_init__(self):
        m = np.array(self.mass, dtype=float)
        if m.ndim != 1 or np.any(m < 0) or abs(m.sum() - 1.0) > NORM_TOL:
            raise ValidationError("marginal must be a nonnegative vector summing to 1")
        m.flags.writeable = False
        object.__setattr__(self, "mass", m)


def tv_distance(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


# -- measure process -----------------------------------------------------------


def step_measure(record: TrainRecord, n: int, n_states: int, n_actions: int) -> OccupationMeasure:
    """Measure occupied during step ``n``.

    Replay steps whose buffer was still filling made no update; they are
    represented by the Dirac mass of the current pair.
    """
    if record.batch is not None and record.batch[n]:
        idx = record.batch[n]
        mass = 1.0 / len(idx)
        return OccupationMeasure.from_atoms(
            [(int(record.states[k]), int(record.actions[k]), mass) for k in idx], n_states, n_actions)
    return OccupationMeasure.dirac(int(record.states[n]), int(record.actions[n]), n_states, n_actions)


def measure_at(record: TrainRecord, t: float, mdp: Mdp, axis: TimeAxis | None = None) -> OccupationMeasure:
    """``mu(t)`` of the record, piecewise constant on ``[t_n, t_{n+1})``."""
    axis = axis or TimeAxis.of(record)
    return step_measure(record, axis.step_at(t), mdp.n_states, mdp.n_actions)


def _step_weights(record: TrainRecord, steps: np.ndarray, n_states, n_actions, masses) -> np.ndarray:
    w = np.zeros((n_states, n_actions))
    if record.batch is None:
        np.add.at(w, (record.states[steps], record.actions[steps]), masses)
        return w
    for n, m in zip(steps, masses):
        idx = record.batch[n]
        if idx:
            share = m / len(idx)
            for k in idx:
                w[record.states[k], record.actions[k]] += share
        else:
            w[record.states[n], record.actions[n]] += m
    return w


def window_measure(record: TrainRecord, t_start: float, t_end: float, mdp: Mdp,
                   axis: TimeAxis | None = None) -> OccupationMeasure:
    """Time average of ``mu`` over ``[t_start, t_end]``.

    Each step contributes the length of its interval's overlap with the
    window, so a step fully inside the window is weighted by ``gamma(n)``.
    """
    axis = axis or TimeAxis.of(record)
    if not 0.0 <= t_start < t_end <= axis.end:
        raise InputError(f"window [{t_start!r}, {t_end!r}] empty or outside [0, {axis.end!r}]")
    lo = max(axis.first_step_after(t_start) - 1, 0)
    hi = min(axis.first_step_after(t_end), axis.n_steps)
    steps = np.arange(lo, hi)
    overlap = np.minimum(axis.t[steps + 1], t_end) - np.maximum(axis.t[steps], t_start)
    keep = overlap > 0
    steps, overlap = steps[keep], overlap[keep]
    w = _step_weights(record, steps, mdp.n_states, mdp.n_actions, overlap)
    return OccupationMeasure(w / w.sum())


def tail_window(axis: TimeAxis, fraction: float) -> tuple[float, float]:
    if not 0.0 < fraction <= 1.0:
        raise InputError(f"window fraction must lie in (0, 1], got {fraction!r}")
    if axis.end <= 0:
        raise InputError("record has an empty time axis")
    return (1.0 - fraction) * axis.end, axis.end


def tail_estimate(record: TrainRecord, fraction: float, mdp: Mdp,
                  axis: TimeAxis | None = None) -> OccupationMeasure:
    """Estimate of the limiting measure: average over the final time fraction."""
    if len(record) == 0:
        raise InputError("cannot estimate a tail measure from an empty record")
    axis = axis or TimeAxis.of(record)
    return window_measure(record, *tail_window(axis, fraction), mdp, axis)


# -- kernels and stationarity ------------------------------------------------------


def pushforward(marginal, fk: FrozenKernel) -> MarginalHistogram:
    """``pi -> pi P``."""
    m = marginal.mass if isinstance(marginal, MarginalHistogram) else np.asarray(marginal, dtype=float)
    if m.shape != (fk.n_states,):
        raise InputError(f"marginal of length {m.shape} vs kernel on {fk.n_states} states")
    return MarginalHistogram(m @ fk.matrix)


def behaviour_policy(topology: Topology, theta: np.ndarray, mdp: Mdp, epsilon: float) -> np.ndarray:
    """Epsilon-greedy action probabilities ``pi_theta(x, a)``."""
    q = q_table(topology, theta, mdp.states)
    pi = np.full(q.shape, epsilon / mdp.n_actions)
    pi[np.arange(mdp.n_states), np.argmax(q, axis=1)] += 1.0 - epsilon
    return pi


def frozen_kernel(topology: Topology, theta: np.ndarray, mdp: Mdp, epsilon: float = 0.0) -> FrozenKernel:
    return policy_kernel(mdp, behaviour_policy(topology, theta, mdp, epsilon))


def stationarity_gap(measure, topology: Topology, theta: np.ndarray, mdp: Mdp, epsilon: float = 0.0) -> float:
    """TV distance between the state marginal ``m`` and ``m P_theta``."""
    m = measure.marginal() if isinstance(measure, OccupationMeasure) else measure
    fk = frozen_kernel(topology, theta, mdp, epsilon)
    return tv_distance(m.mass, pushforward(m, fk).mass)


def measure_distance(m1: OccupationMeasure, m2: OccupationMeasure) -> float:
    if m1.shape != m2.shape:
        raise InputError(f"measures live on different spaces {m1.shape} vs {m2.shape}")
    return tv_distance(m1.weights, m2.weights)


@dataclass
class StationarityReport:
    gap: float
    window: tuple[float, float]
    checkpoint: int
    sensitivity: tuple[float, float, float]  # gap at window start / mid / end checkpoints
    epsilon: float

    def to_dict(self) -> dict:
        return {"gap": self.gap, "window": list(self.window), "checkpoint": self.checkpoint,
                "sensitivity": list(self.sensitivity), "epsilon": self.epsilon}


def _nearest(keys, step):
    keys = np.asarray(sorted(keys))
    return int(keys[np.argmin(np.abs(keys - step))])


def stationarity_report(record: TrainRecord, checkpoints: dict, topology: Topology, mdp: Mdp,
                        fraction: float = 0.2) -> StationarityReport:
    """Gap of the tail marginal under the kernel frozen at the window's checkpoints.

    The headline gap uses the checkpoint nearest the window midpoint; the
    sensitivity triple repeats it at the checkpoints nearest the window
    start, midpoint and end.  The exploration rate is the logged one at the
    checkpoint step.
    """
    axis = TimeAxis.of(record)
    t0, t1 = tail_window(axis, fraction)
    m = tail_estimate(record, fraction, mdp, axis).marginal()
    n_start = axis.first_step_after(t0)
    n_mid = axis.first_step_after(0.5 * (t0 + t1))
    n_end = len(record)
    gaps = []
    chosen = []
    for n in (n_start, n_mid, n_end):
        c = _nearest(checkpoints, n)
        eps = float(record.epsilons[min(c, len(record) - 1)])
        gaps.append(stationarity_gap(m, topology, checkpoints[c], mdp, eps))
        chosen.append((c, eps))
    c_mid, eps_mid = chosen[1]
    return StationarityReport(gaps[1], (t0, t1), c_mid, tuple(gaps), eps_mid)


# -- export ----------------------------------------------------------------------


def measure_to_csv(measure: OccupationMeasure, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["state_index", "action", "weight"])
        for x, a, mass in measure.atoms():
            w.writerow([x, a, repr(mass)])


def marginal_to_csv(marginal: MarginalHistogram, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["state_index", "mass"])
        for x, mass in enumerate(marginal.mass):
            w.writerow([x, repr(float(mass))])


def report_to_json(report: StationarityReport, path, config_hash: str | None = None) -> None:
    d = report.to_dict()
    if config_hash is not None:
        d["config_hash"] = config_hash
    with open(path, "w") as fh:
        json.dump(d, fh, indent=1, sort_keys=True)
        fh.write("\n")
