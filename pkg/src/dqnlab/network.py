"""Bias-free feedforward Q-network with one output sublayer per action.

Layout of the flat weight vector ``theta`` (this ordering is part of the
checkpoint format and never changes):

1. hidden layers in order; layer ``l`` maps ``n_in`` units to ``n_out``
   units and stores ``W[dst, src]`` row-major at ``offset + dst * n_in + src``;
2. then, for each action ``a`` in order, its sublayer matrix
   ``W_a[unit, src]`` (row-major, ``l(a)`` rows, one column per unit of the
   last hidden layer, or per input coordinate when there are no hidden
   layers), immediately followed by the ``l(a)`` output weights ``theta_a``.

The value for action ``a`` is ``Q(x, a) = sum_i theta_a[i] * act_a[i]``
where ``act_a = sigma(W_a h)``; there are no bias terms anywhere.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import expit, ndtr

from .errors import InputError, NumericalError, ValidationError

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class ActivationKind:
    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]
    squashing: bool
    bound: float | None  # sup |sigma|, only for squashing kinds


def _sigmoid_deriv(u):
    s = expit(u)
    return s * (1.0 - s)


def _tanh_deriv(u):
    t = np.tanh(u)
    return 1.0 - t * t


def _gelu(u):
    # exact form u * Phi(u), not the tanh approximation
    return u * ndtr(u)


def _gelu_deriv(u):
    return ndtr(u) + u * _INV_SQRT_2PI * np.exp(-0.5 * u * u)


def _silu(u):
    return u * expit(u)


def _silu_deriv(u):
    s = expit(u)
    return s * (1.0 + u * (1.0 - s))


ACTIVATIONS: dict[str, ActivationKind] = {
    "sigmoid": ActivationKind("sigmoid", expit, _sigmoid_deriv, True, 1.0),
    "tanh": ActivationKind("tanh", np.tanh, _tanh_deriv, True, 1.0),
    "gelu": ActivationKind("gelu", _gelu, _gelu_deriv, False, None),
    "silu": ActivationKind("silu", _silu, _silu_deriv, False, None),
}


def activation(name: str) -> ActivationKind:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValidationError(
            f"activation {name!r} not in catalogue {sorted(ACTIVATIONS)}"
        ) from None


@dataclass(frozen=True)
class Topology:
    """Network shape.

    ``activations`` has one entry per hidden layer plus a final entry used by
    every output sublayer.  A single string is broadcast to all layers.
    """

    input_dim: int
    hidden: tuple[int, ...]
    output_widths: tuple[int, ...]
    activations: tuple[str, ...] | str = "tanh"
    _blocks: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        hidden = tuple(int(w) for w in self.hidden)
        outs = tuple(int(w) for w in self.output_widths)
        acts = self.activations
        if isinstance(acts, str):
            acts = (acts,) * (len(hidden) + 1)
        acts = tuple(acts)
        if int(self.input_dim) < 1:
            raise ValidationError("input_dim must be >= 1")
        if any(w < 1 for w in hidden) or any(w < 1 for w in outs):
            raise ValidationError("all layer widths must be >= 1")
        if not outs:
            raise ValidationError("need at least one action sublayer")
        if len(acts) != len(hidden) + 1:
            raise ValidationError(
                f"expected {len(hidden) + 1} activations (hidden layers + output), got {len(acts)}"
            )
        for a in acts:
            activation(a)
        object.__setattr__(self, "input_dim", int(self.input_dim))
        object.__setattr__(self, "hidden", hidden)
        object.__setattr__(self, "output_widths", outs)
        object.__setattr__(self, "activations", acts)

        blocks = []
        offset = 0
        n_in = self.input_dim
        for w in hidden:
            blocks.append((offset, (w, n_in)))
            offset += w * n_in
            n_in = w
        sub = []
        for la in outs:
            w_block = (offset, (la, n_in))
            offset += la * n_in
            out_block = (offset, la)
            offset += la
            sub.append((w_block, out_block))
        object.__setattr__(self, "_blocks", (tuple(blocks), tuple(sub), offset))

    @property
    def n_actions(self) -> int:
        return len(self.output_widths)

    @property
    def n_params(self) -> int:
        return self._blocks[2]

    @property
    def last_width(self) -> int:
        return self.hidden[-1] if self.hidden else self.input_dim

    def hidden_index(self, layer: int, src: int, dst: int) -> int:
        offset, (n_out, n_in) = self._blocks[0][layer]
        if not (0 <= src < n_in and 0 <= dst < n_out):
            raise InputError(f"edge ({src}->{dst}) outside layer {layer} of shape {n_out}x{n_in}")
        return offset + dst * n_in + src

    def sublayer_index(self, action: int, unit: int, src: int) -> int:
        (offset, (la, n_in)), _ = self._blocks[1][action]
        if not (0 <= unit < la and 0 <= src < n_in):
            raise InputError(f"edge ({src}->{unit}) outside sublayer of action {action}")
        return offset + unit * n_in + src

    def output_index(self, action: int, unit: int) -> int:
        _, (offset, la) = self._blocks[1][action]
        if not 0 <= unit < la:
            raise InputError(f"unit {unit} outside output sublayer of action {action}")
        return offset + unit

    def output_slice(self, action: int) -> slice:
        _, (offset, la) = self._blocks[1][action]
        return slice(offset, offset + la)

    def action_slice(self, action: int) -> slice:
        """All parameters private to ``action`` (sublayer matrix + output weights)."""
        (offset, _), (out_off, la) = self._blocks[1][action]
        return slice(offset, out_off + la)

    def unpack(self, theta: np.ndarray):
        """Views of ``theta``: (hidden matrices, [(W_a, theta_a) per action])."""
        hidden = [theta[o:o + r * c].reshape(r, c) for o, (r, c) in self._blocks[0]]
        sub = [
            (theta[o:o + r * c].reshape(r, c), theta[oo:oo + la])
            for (o, (r, c)), (oo, la) in self._blocks[1]
        ]
        return hidden, sub

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "output_widths": list(self.output_widths),
            "activations": list(self.activations),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Topology":
        return cls(d["input_dim"], tuple(d["hidden"]), tuple(d["output_widths"]), tuple(d["activations"]))


def check_theta(topology: Topology, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (topology.n_params,):
        raise InputError(f"theta has shape {theta.shape}, topology needs ({topology.n_params},)")
    return theta


@dataclass
class ForwardTrace:
    """Workspace of one forward pass.

    ``pre[l]``/``post[l]`` hold hidden layer ``l`` inputs and outputs;
    ``sub_pre[a]``/``sub_post[a]`` the same for action ``a``'s sublayer.
    """

    x: np.ndarray
    pre: list
    post: list
    sub_pre: list
    sub_post: list
    q: np.ndarray


def _check_finite(values, where):
    if not np.all(np.isfinite(values)):
        unit = int(np.flatnonzero(~np.isfinite(values))[0])
        raise NumericalError(f"non-finite value at {where}, unit {unit}")


def forward(topology: Topology, theta: np.ndarray, x) -> ForwardTrace:
    x = np.asarray(x, dtype=float)
    if x.shape != (topology.input_dim,):
        raise InputError(f"state has shape {x.shape}, network expects ({topology.input_dim},)")
    hidden, sub = topology.unpack(theta)
    acts = topology.activations
    h = x
    pre, post = [], []
    for l, W in enumerate(hidden):
        z = W @ h
        h = ACTIVATIONS[acts[l]].fn(z)
        _check_finite(h, f"hidden layer {l}")
        pre.append(z)
        post.append(h)
    out_act = ACTIVATIONS[acts[-1]].fn
    sub_pre, sub_post = [], []
    q = np.empty(len(sub))
    for a, (Wa, ta) in enumerate(sub):
        z = Wa @ h
        act = out_act(z)
        _check_finite(act, f"output sublayer of action {a}")
        sub_pre.append(z)
        sub_post.append(act)
        q[a] = ta @ act
    _check_finite(q, "output")
    return ForwardTrace(x, pre, post, sub_pre, sub_post, q)


def q_values(topology: Topology, theta: np.ndarray, x) -> np.ndarray:
    """``Q(x, . ; theta)`` as a vector over actions."""
    return forward(topology, theta, x).q


def q_gradient(topology: Topology, theta: np.ndarray, x, a: int,
               trace: ForwardTrace | None = None) -> np.ndarray:
    """Exact reverse-mode gradient of ``Q(x, a; theta)`` w.r.t. ``theta``.

    Only the hidden layers and action ``a``'s own sublayer receive nonzero
    entries; every other action's parameters get exact zeros.
    """
    if not 0 <= a < topology.n_actions:
        raise InputError(f"action {a} outside 0..{topology.n_actions - 1}")
    if trace is None:
        trace = forward(topology, theta, x)
    hidden, sub = topology.unpack(theta)
    grad = np.zeros(topology.n_params)
    ghidden, gsub = topology.unpack(grad)
    acts = topology.activations
    h_last = trace.post[-1] if trace.post else trace.x

    Wa, ta = sub[a]
    gWa, gta = gsub[a]
    gta[:] = trace.sub_post[a]
    dz = ta * ACTIVATIONS[acts[-1]].deriv(trace.sub_pre[a])
    gWa[:] = np.outer(dz, h_last)
    if hidden:
        dh = Wa.T @ dz
        for l in range(len(hidden) - 1, -1, -1):
            dz = dh * ACTIVATIONS[acts[l]].deriv(trace.pre[l])
            below = trace.post[l - 1] if l > 0 else trace.x
            ghidden[l][:] = np.outer(dz, below)
            if l > 0:
                dh = hidden[l].T @ dz
    _check_finite(grad, "gradient")
    return grad


def q_table(topology: Topology, theta: np.ndarray, states: np.ndarray) -> np.ndarray:
    """``Q`` on every row of ``states``, shape (n_states, n_actions)."""
    return np.array([forward(topology, theta, s).q for s in states])


# -- bound check -------------------------------------------------------------

@dataclass
class BoundReport:
    squashing: bool
    n_probes: int
    max_abs_q: np.ndarray           # per action, over the probes
    bound: np.ndarray | None        # c * l(a) * ||theta_a||_2, squashing only
    tight_bound: np.ndarray | None  # c * sqrt(l(a)) * ||theta_a||_2
    empirical_constant: float       # sup |Q| / ||theta||_2 over the probes
    violations: list = field(default_factory=list)  # (state index, action, |Q|, bound)

    @property
    def ok(self) -> bool:
        return not self.violations


def q_bound_check(topology: Topology, theta: np.ndarray, states) -> BoundReport:
    """Check ``|Q(x,a)| <= c * l(a) * ||theta_a||_2`` on the supplied states.

    For non-squashing activations no state-free bound exists; the report
    then carries only the empirical constant ``sup |Q| / ||theta||_2`` over
    the given (compact) sample.
    """
    theta = check_theta(topology, theta)
    states = np.atleast_2d(np.asarray(states, dtype=float))
    kind = ACTIVATIONS[topology.activations[-1]]
    table = q_table(topology, theta, states)
    max_abs = np.max(np.abs(table), axis=0)
    norm = float(np.linalg.norm(theta))
    empirical = float(np.max(max_abs) / norm) if norm > 0 else 0.0
    if not kind.squashing:
        return BoundReport(False, len(states), max_abs, None, None, empirical)
    widths = np.array(topology.output_widths, dtype=float)
    out_norms = np.array([np.linalg.norm(theta[topology.output_slice(a)])
                          for a in range(topology.n_actions)])
    bound = kind.bound * widths * out_norms
    tight = kind.bound * np.sqrt(widths) * out_norms
    violations = [
        (i, a, float(abs(table[i, a])), float(bound[a]))
        for i, a in zip(*np.nonzero(np.abs(table) > bound))
    ]
    return BoundReport(True, len(states), max_abs, bound, tight, empirical, violations)


# -- initializers --------------------------------------------------------------

def _fan_ins(topology: Topology) -> np.ndarray:
    fan = np.empty(topology.n_params)
    n_in = topology.input_dim
    offset = 0
    for w in topology.hidden:
        fan[offset:offset + w * n_in] = n_in
        offset += w * n_in
        n_in = w
    for la in topology.output_widths:
        fan[offset:offset + la * n_in] = n_in
        offset += la * n_in
        fan[offset:offset + la] = la
        offset += la
    return fan


def uniform_fan_in_init(topology: Topology, rng: np.random.Generator) -> np.ndarray:
    """Independent ``U[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` per weight."""
    limit = 1.0 / np.sqrt(_fan_ins(topology))
    return rng.uniform(-limit, limit)


def suppress_action_init(topology: Topology, rng: np.random.Generator,
                         action: int = 1, scale: float = 1.0) -> np.ndarray:
    """Fan-in uniform draw with sign-forced output weights.

    Output weights of ``action`` are made strictly negative and all other
    output weights strictly positive, each of magnitude in
    ``[scale/2, scale]``.  With a sigmoid output sublayer the suppressed
    action then has ``Q < 0 < Q`` of every other action at every state and
    for any hidden weights, so a purely greedy learner never selects it.
    """
    theta = uniform_fan_in_init(topology, rng)
    if not 0 <= action < topology.n_actions:
        raise InputError(f"action {action} outside 0..{topology.n_actions - 1}")
    for a in range(topology.n_actions):
        sl = topology.output_slice(a)
        mag = rng.uniform(0.5 * scale, scale, size=sl.stop - sl.start)
        theta[sl] = -mag if a == action else mag
    return theta


INITIALIZERS = {
    "uniform_fan_in": uniform_fan_in_init,
    "suppress_action": suppress_action_init,
}


def initialize(topology: Topology, name: str, rng: np.random.Generator, **kwargs) -> np.ndarray:
    try:
        init = INITIALIZERS[name]
    except KeyError:
        raise ValidationError(f"initializer {name!r} not in {sorted(INITIALIZERS)}") from None
    try:
        return init(topology, rng, **kwargs)
    except TypeError as exc:
        raise ValidationError(f"initializer {name!r}: {exc}") from None


def tabular_weights(topology: Topology, q: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Weights reproducing a table ``q[s, a]`` on one-hot inputs.

    Needs no hidden layers, ``input_dim == n_states``, output width 1 and a
    tanh output sublayer: then ``Q(e_s, a) = c_a * tanh(W_a[0, s])`` and
    ``W_a[0, s] = artanh(q[s, a] / c_a)`` with ``c_a > max |q[:, a]|``.
    """
    q = np.asarray(q, dtype=float)
    if topology.hidden or set(topology.output_widths) != {1} or topology.activations[-1] != "tanh":
        raise InputError("tabular_weights needs a hidden-free tanh net with unit output sublayers")
    if q.shape != (topology.input_dim, topology.n_actions):
        raise InputError(f"table shape {q.shape} does not match the topology")
    theta = np.zeros(topology.n_params)
    for a in range(topology.n_actions):
        c = scale if scale is not None else 2.0 * max(1.0, float(np.max(np.abs(q[:, a]))))
        theta[topology.output_index(a, 0)] = c
        for s in range(topology.input_dim):
            theta[topology.sublayer_index(a, 0, s)] = np.arctanh(q[s, a] / c)
    return theta


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_FORMAT = "dqnlab-checkpoint/1"


def checkpoint_dict(topology: Topology, theta: np.ndarray, step: int, rng_state=None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "topology": topology.to_dict(),
        "step": int(step),
        "theta": [float(v) for v in theta],
        "rng_state": rng_state,
    }


def save_checkpoint(path, topology: Topology, theta: np.ndarray, step: int, rng_state=None) -> None:
    """Write a JSON checkpoint; float reprs round-trip float64 bit-exactly."""
    payload = checkpoint_dict(topology, theta, step, rng_state)
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Return ``(topology, theta, step, rng_state)``."""
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except OSError as exc:
        raise InputError(f"{path}: cannot read checkpoint ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path}: unknown checkpoint format {d.get('format')!r}")
    topology = Topology.from_dict(d["topology"])
    theta = check_theta(topology, np.array(d["theta"], dtype=float))
    return topology, theta, d["step"], d.get("rng_state")
