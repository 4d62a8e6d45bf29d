"""Finite MDPs with enumerable kernels, plus brute-force oracles.

Every kernel row is a short list of ``(next_state, probability)`` pairs, so
all expectations used by the training and diagnostics code can be computed
by exact enumeration instead of sampling.
"""
from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ConvergenceError, InputError, NumericalError, ValidationError

ROW_TOL = 1e-12

KernelRow = tuple[tuple[int, float], ...]


def _readonly(arr):
    arr = np.array(arr, dtype=float)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Mdp:
    """Controlled Markov chain ``(S, A, p, r, alpha)`` on embedded states.

    Parameters
    ----------
    states : array_like, shape (S, k)
        Embedding of each state in R^k; these are the network inputs.
    n_actions : int
        Actions are ``0 .. n_actions - 1``.
    kernel : nested sequence
        ``kernel[x][a]`` is a sequence of ``(y, p)`` pairs.
    reward : array_like, shape (S, A)
    discount : float
        Strictly inside (0, 1).
    initial_dist : array_like, shape (S,)
    """

    states: np.ndarray
    n_actions: int
    kernel: tuple[tuple[KernelRow, ...], ...]
    reward: np.ndarray
    discount: float
    initial_dist: np.ndarray
    name: str = ""
    _dense: np.ndarray = field(init=False, repr=False, compare=False)
    _cdf: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        states = _readonly(self.states)
        if states.ndim == 1:
            states = _readonly(states.reshape(-1, 1))
        if states.ndim != 2 or states.shape[0] == 0 or states.shape[1] == 0:
            raise ValidationError("states: expected a non-empty list of vectors")
        if not np.all(np.isfinite(states)):
            raise ValidationError("states: entries must be finite")
        n_states = states.shape[0]
        n_actions = int(self.n_actions)
        if n_actions < 1:
            raise ValidationError("actions: need at least one action")

        if len(self.kernel) != n_states:
            raise ValidationError(f"kernel: expected {n_states} rows of states, got {len(self.kernel)}")
        kernel = []
        dense = np.zeros((n_states, n_actions, n_states))
        cdf = []
        for x, per_action in enumerate(self.kernel):
            if len(per_action) != n_actions:
                raise ValidationError(f"kernel[{x}]: expected {n_actions} actions, got {len(per_action)}")
            rows, cdf_x = [], []
            for a, row in enumerate(per_action):
                row = _validate_row(row, n_states, f"kernel[{x}][{a}]")
                rows.append(row)
                for y, p in row:
                    dense[x, a, y] += p
                cdf_x.append(([y for y, _ in row], list(np.cumsum([p for _, p in row]))))
            kernel.append(tuple(rows))
            cdf.append(tuple(cdf_x))

        reward = _readonly(self.reward)
        if reward.shape != (n_states, n_actions):
            raise ValidationError(f"reward: expected shape ({n_states}, {n_actions}), got {reward.shape}")
        if not np.all(np.isfinite(reward)):
            raise ValidationError("reward: entries must be finite")
        discount = float(self.discount)
        if not 0.0 < discount < 1.0:
            raise ValidationError(f"discount: must lie strictly inside (0, 1), got {discount}")
        init = _readonly(self.initial_dist)
        if init.shape != (n_states,):
            raise ValidationError(f"initial_dist: expected length {n_states}, got shape {init.shape}")
        if np.any(init < 0) or abs(init.sum() - 1.0) > ROW_TOL:
            raise ValidationError("initial_dist: must be a probability vector")

        dense.flags.writeable = False
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "n_actions", n_actions)
        object.__setattr__(self, "kernel", tuple(kernel))
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "discount", discount)
        object.__setattr__(self, "initial_dist", init)
        object.__setattr__(self, "_dense", dense)
        object.__setattr__(self, "_cdf", tuple(cdf))

    @property
    def n_states(self) -> int:
        return self.states.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def transition_matrix(self) -> np.ndarray:
        """Dense kernel ``P[x, a, y]`` (read-only)."""
        return self._dense

    def row(self, x: int, a: int) -> KernelRow:
        self.check_pair(x, a)
        return self.kernel[x][a]

    def check_pair(self, x, a):
        if not (isinstance(x, (int, np.integer)) and 0 <= x < self.n_states):
            raise InputError(f"state index {x!r} outside 0..{self.n_states - 1}")
        if not (isinstance(a, (int, np.integer)) and 0 <= a < self.n_actions):
            raise InputError(f"action {a!r} outside 0..{self.n_actions - 1}")

    def with_initial(self, initial_dist) -> "Mdp":
        return Mdp(self.states, self.n_actions, self.kernel, self.reward,
                   self.discount, initial_dist, self.name)


def _validate_row(row, n_states, where) -> KernelRow:
    out = []
    try:
        pairs = list(row)
    except TypeError:
        raise ValidationError(f"{where}: expected a list of [next_index, prob] pairs") from None
    if not pairs:
        raise ValidationError(f"{where}: empty kernel row")
    for i, pair in enumerate(pairs):
        try:
            y, p = pair
        except (TypeError, ValueError):
            raise ValidationError(f"{where}[{i}]: expected a [next_index, prob] pair") from None
        if isinstance(y, bool) or not isinstance(y, (int, np.integer)) or not 0 <= y < n_states:
            raise ValidationError(f"{where}[{i}]: next index {y!r} outside 0..{n_states - 1}")
        p = float(p)
        if not np.isfinite(p) or p < 0:
            raise ValidationError(f"{where}[{i}]: probability {p!r} must be finite and nonnegative")
        out.append((int(y), p))
    total = sum(p for _, p in out)
    if abs(total - 1.0) > ROW_TOL:
        raise ValidationError(f"{where}: probabilities sum to {total!r}, expected 1")
    return tuple(out)


@dataclass(frozen=True)
class OptimalSolution:
    q_star: np.ndarray
    v_star: np.ndarray
    pi_star: np.ndarray
    residual: float
    iterations: int


@dataclass(frozen=True)
class FrozenKernel:
    """State transition matrix of a fixed stochastic policy composed with p."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError(f"frozen kernel must be square, got shape {m.shape}")
        if np.any(m < 0) or np.max(np.abs(m.sum(axis=1) - 1.0)) > ROW_TOL:
            raise ValidationError("frozen kernel must be row-stochastic")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def n_states(self) -> int:
        return self.matrix.shape[0]


def policy_kernel(mdp: Mdp, policy: np.ndarray) -> FrozenKernel:
    """Compose a stochastic policy ``policy[x, a]`` with the MDP kernel."""
    policy = np.asarray(policy, dtype=float)
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise InputError(f"policy shape {policy.shape} does not match the MDP")
    return FrozenKernel(np.einsum("xa,xay->xy", policy, mdp.transition_matrix))


# -- operations --------------------------------------------------------------

def sample_transition(mdp: Mdp, x: int, a: int, rng: np.random.Generator) -> tuple[int, float]:
    """Draw ``y ~ p(.|x, a)`` by inverse CDF over the enumerated support."""
    mdp.check_pair(x, a)
    targets, cum = mdp._cdf[x][a]
    u = rng.random()
    i = bisect.bisect_right(cum, u)
    if i >= len(targets):  # u beyond a cumulative sum that rounded below 1
        i = len(targets) - 1
    return targets[i], float(mdp.reward[x, a])


def expected_max_q(mdp: Mdp, x: int, a: int, q_values_fn: Callable[[int], np.ndarray]) -> float:
    """``sum_y p(y|x,a) * max_a' Q(y, a')`` by exact enumeration."""
    total = 0.0
    for y, p in mdp.row(x, a):
        total += p * float(np.max(q_values_fn(y)))
    return total


def bellman_operator(mdp: Mdp, q: np.ndarray) -> np.ndarray:
    return mdp.reward + mdp.discount * mdp.transition_matrix @ q.max(axis=1)


def greedy(q: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest action index."""
    return np.argmax(q, axis=-1)


POLISH_SWEEPS = 64


def value_iteration(mdp: Mdp, tol: float = 1e-10, max_iters: int = 100_000) -> OptimalSolution:
    """Iterate ``Q <- r + alpha * P max_a Q`` to a sup-norm fixed point.

    Stops once successive iterates differ by less than
    ``tol * (1 - alpha) / alpha``, which bounds both the distance to Q* and
    the Bellman residual by ``tol``.  A few extra sweeps then run while the
    iterate still moves, so fixed points representable in floating point
    (such as a geometric series summing to 2) come out exact.
    """
    if not tol > 0:
        raise InputError("tol must be positive")
    alpha = mdp.discount
    threshold = tol * (1.0 - alpha) / alpha
    q = np.zeros((mdp.n_states, mdp.n_actions))
    change = np.inf
    for it in range(1, max_iters + 1):
        q_next = bellman_operator(mdp, q)
        change = float(np.max(np.abs(q_next - q)))
        q = q_next
        if change < threshold:
            for _ in range(POLISH_SWEEPS):
                q_next = bellman_operator(mdp, q)
                if np.array_equal(q_next, q):
                    break
                q = q_next
            residual = float(np.max(np.abs(bellman_operator(mdp, q) - q)))
            return OptimalSolution(q, q.max(axis=1), greedy(q), residual, it)
    raise ConvergenceError(f"value iteration did not converge in {max_iters} iterations", change)


def recurrent_classes(matrix: np.ndarray) -> list[np.ndarray]:
    """Sink components of the support digraph, ordered by smallest state."""
    graph = csr_matrix(np.asarray(matrix) > 0)
    n_comp, labels = connected_components(graph, directed=True, connection="strong")
    classes = []
    for c in range(n_comp):
        members = np.flatnonzero(labels == c)
        leaks = graph[members].indices
        if np.all(labels[leaks] == c):
            classes.append(members)
    classes.sort(key=lambda m: m[0])
    return classes


def stationary_distributions(fk: FrozenKernel, tol: float = 1e-10) -> list[np.ndarray]:
    """One stationary distribution per recurrent class of ``fk``.

    Each class is solved as ``pi (P_C - I) = 0, sum(pi) = 1`` by least
    squares on the restricted matrix; the result is embedded back into the
    full state space and checked against ``||pi P - pi||_1 <= tol``.
    """
    P = fk.matrix
    n = P.shape[0]
    out = []
    for members in recurrent_classes(P):
        sub = P[np.ix_(members, members)]
        k = len(members)
        lhs = np.vstack([sub.T - np.eye(k), np.ones((1, k))])
        rhs = np.zeros(k + 1)
        rhs[-1] = 1.0
        pi_c, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
        pi_c = np.clip(pi_c, 0.0, None)
        pi = np.zeros(n)
        pi[members] = pi_c / pi_c.sum()
        err = float(np.abs(pi @ P - pi).sum())
        if err > tol:
            raise NumericalError(f"stationary solve residual {err:.3e} exceeds tol {tol:.1e}")
        out.append(pi)
    return out


# -- file format -------------------------------------------------------------

def mdp_to_dict(mdp: Mdp) -> dict:
    return {
        "states": mdp.states.tolist(),
        "actions": mdp.n_actions,
        "kernel": [[[[y, p] for y, p in row] for row in per_action] for per_action in mdp.kernel],
        "reward": mdp.reward.tolist(),
        "discount": mdp.discount,
        "initial_dist": mdp.initial_dist.tolist(),
    }


_MDP_KEYS = {"states", "actions", "kernel", "reward", "discount", "initial_dist"}


def mdp_from_dict(d: dict, name: str = "") -> Mdp:
    if not isinstance(d, dict):
        raise ValidationError("MDP file: top level must be an object")
    missing = _MDP_KEYS - d.keys()
    if missing:
        raise ValidationError(f"MDP file: missing keys {sorted(missing)}")
    unknown = d.keys() - _MDP_KEYS
    if unknown:
        raise ValidationError(f"MDP file: unknown keys {sorted(unknown)}")
    actions = d["actions"]
    if isinstance(actions, bool) or not isinstance(actions, int):
        raise ValidationError("actions: expected an integer count")
    try:
        states = np.array(d["states"], dtype=float)
    except (TypeError, ValueError):
        raise ValidationError("states: expected an array of float arrays") from None
    try:
        reward = np.array(d["reward"], dtype=float)
    except (TypeError, ValueError):
        raise ValidationError("reward: expected a 2-D numeric array") from None
    try:
        init = np.array(d["initial_dist"], dtype=float)
    except (TypeError, ValueError):
        raise ValidationError("initial_dist: expected a numeric array") from None
    if not isinstance(d["kernel"], list):
        raise ValidationError("kernel: expected nested arrays")
    if isinstance(d["discount"], bool) or not isinstance(d["discount"], (int, float)):
        raise ValidationError("discount: expected a number")
    return Mdp(states, actions, d["kernel"], reward, d["discount"], init, name)


def load_mdp(path) -> Mdp:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"{path}: cannot read MDP file ({exc.strerror})") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    try:
        return mdp_from_dict(data, name=path.stem)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def save_mdp(mdp: Mdp, path) -> None:
    Path(path).write_text(json.dumps(mdp_to_dict(mdp), indent=1) + "\n")


# -- benchmarks --------------------------------------------------------------

def one_hot_states(n: int) -> np.ndarray:
    return np.eye(n)


def single_state_mdp(reward: float = 1.0, discount: float = 0.5) -> Mdp:
    """One state, one action, self loop: ``Q* = r / (1 - alpha)``."""
    return Mdp([[1.0]], 1, [[[(0, 1.0)]]], [[reward]], discount, [1.0], "single")


def chain_mdp(slip: float = 0.2, discount: float = 0.7) -> Mdp:
    """Five-state, two-action chain with slippery moves.

    Action 0 moves left, action 1 moves right; with probability ``slip`` the
    move goes the other way (clipped at the ends).  Being in state 4 pays 1
    for either action; going left from state 0 pays 0.2, a weaker attractor
    that makes the left end locally tempting.
    """
    n = 5
    kernel = []
    for x in range(n):
        left, right = max(x - 1, 0), min(x + 1, n - 1)
        kernel.append([
            _merge([(left, 1.0 - slip), (right, slip)]),
            _merge([(right, 1.0 - slip), (left, slip)]),
        ])
    reward = np.zeros((n, 2))
    reward[4, :] = 1.0
    reward[0, 0] = 0.2
    init = np.zeros(n)
    init[2] = 1.0
    return Mdp(one_hot_states(n), 2, kernel, reward, discount, init, "chain")


def reducible_mdp(start_component: int = 0, discount: float = 0.7) -> Mdp:
    """Two closed three-state components {0,1,2} and {3,4,5}.

    Within each component the two actions drift around a cycle in opposite
    directions with noise, so every policy leaves both components
    irreducible and the composed kernel has exactly two recurrent classes.
    """
    kernel = []
    for x in range(6):
        base = 3 * (x // 3)
        i = x - base
        fwd, back = base + (i + 1) % 3, base + (i - 1) % 3
        kernel.append([
            _merge([(fwd, 0.7), (x, 0.2), (back, 0.1)]),
            _merge([(back, 0.7), (x, 0.2), (fwd, 0.1)]),
        ])
    reward = np.array([
        [0.0, 0.3], [0.5, 0.0], [1.0, 0.2],
        [0.2, 0.0], [0.0, 0.6], [0.4, 1.0],
    ])
    init = np.zeros(6)
    init[3 * start_component] = 1.0
    return Mdp(one_hot_states(6), 2, kernel, reward, discount, init, "reducible")


def trap_mdp(discount: float = 0.5) -> Mdp:
    """Four states with action-independent uniform transitions.

    Action 0 always pays 0.5; action 1 pays 1 on states {2, 3} and 0 on
    {0, 1}.  Action 1 is therefore optimal exactly on {2, 3}, while every
    state is visited whatever the policy.  Paired with
    :func:`dqnlab.network.suppress_action_init` the greedy learner never
    tries action 1.
    """
    n = 4
    row = tuple((y, 1.0 / n) for y in range(n))
    kernel = [[row, row] for _ in range(n)]
    reward = np.array([[0.5, 0.0], [0.5, 0.0], [0.5, 1.0], [0.5, 1.0]])
    return Mdp(one_hot_states(n), 2, kernel, reward, discount, np.full(n, 1.0 / n), "trap")


BENCHMARKS: dict[str, Callable[..., Mdp]] = {
    "single": single_state_mdp,
    "chain": chain_mdp,
    "reducible": reducible_mdp,
    "trap": trap_mdp,
}


def _merge(pairs: Sequence[tuple[int, float]]) -> tuple[tuple[int, float], ...]:
    acc: dict[int, float] = {}
    for y, p in pairs:
        if p > 0:
            acc[y] = acc.get(y, 0.0) + p
    return tuple(sorted(acc.items()))
