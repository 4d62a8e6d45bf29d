"""Online, expected-target and experience-replay deep Q-learning loops.

Sign convention: every update is ``theta += gamma * delta * grad Q(x, a)``
with ``delta = target - Q(x, a)`` and the bootstrapped target held fixed.
This is the semi-gradient *descent* direction of ``0.5 * delta**2``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import envs
from .envs import Mdp, expected_max_q, sample_transition
from .errors import DivergenceError, InputError, PreconditionError, ValidationError
from .network import Topology, check_theta, forward, initialize, q_gradient, q_values, save_checkpoint

# -- schedules and policies ---------------------------------------------------


@dataclass(frozen=True)
class StepSchedule:
    """``gamma(n) = c * (n + n0) ** -p`` with ``p`` in (0.5, 1].

    That range is exactly what makes the sequence positive, monotone,
    non-summable and square-summable.
    """

    c: float
    n0: float = 1.0
    p: float = 1.0

    def __post_init__(self):
        if not self.c > 0:
            raise ValidationError(f"schedule.c must be > 0, got {self.c}")
        if not self.n0 >= 1:
            raise ValidationError(f"schedule.n0 must be >= 1, got {self.n0}")
        if not 0.5 < self.p <= 1.0:
            raise ValidationError(
                f"schedule.p must lie in (0.5, 1] for non-summable, square-summable steps, got {self.p}"
            )

    def __call__(self, n: int) -> float:
        return self.c * (n + self.n0) ** -self.p


@dataclass(frozen=True)
class ZeroSchedule:
    """Degenerate ``gamma == 0``; only for tests of the diagnostics."""

    def __call__(self, n: int) -> float:
        return 0.0


@dataclass(frozen=True)
class PolicyConfig:
    """Greedy or epsilon-greedy behaviour.

    ``epsilon(n) = max(floor, epsilon0 * decay ** n)``; ``decay = 1`` gives a
    constant rate.  Greedy mode ignores the epsilon parameters.
    """

    mode: str = "epsilon_greedy"
    epsilon0: float = 1.0
    decay: float = 1.0
    floor: float = 0.0

    def __post_init__(self):
        if self.mode not in ("greedy", "epsilon_greedy"):
            raise ValidationError(f"policy.mode must be 'greedy' or 'epsilon_greedy', got {self.mode!r}")
        for name in ("epsilon0", "floor"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"policy.{name} must lie in [0, 1], got {v}")
        if not 0.0 < self.decay <= 1.0:
            raise ValidationError(f"policy.decay must lie in (0, 1], got {self.decay}")

    def epsilon(self, n: int) -> float:
        if self.mode == "greedy":
            return 0.0
        return max(self.floor, self.epsilon0 * self.decay ** n)


def greedy_action(q: np.ndarray) -> tuple[int, bool]:
    """Argmax with ties to the lowest index, plus a tie flag."""
    a = int(np.argmax(q))
    return a, bool(np.count_nonzero(q == q[a]) > 1)


def _choose(q, epsilon, rng):
    # always two draws so the stream stays aligned whatever the branch
    u = rng.random()
    j = int(rng.integers(len(q)))
    a, tie = greedy_action(q)
    if u < epsilon:
        return j, tie
    return a, tie


def select_action(topology: Topology, theta: np.ndarray, x, policy: PolicyConfig,
                  rng: np.random.Generator, n: int = 0) -> int:
    """Greedy action, or with probability epsilon(n) a uniform one."""
    q = q_values(topology, theta, x)
    return _choose(q, policy.epsilon(n), rng)[0]


# -- replay --------------------------------------------------------------------


@dataclass(frozen=True)
class Transition:
    index: int
    x: int
    a: int
    r: float
    y: int


class ReplayBuffer:
    """Ring of the last ``capacity`` transitions with uniform batch sampling."""

    def __init__(self, capacity: int, batch_size: int):
        if batch_size < 1 or capacity < batch_size:
            raise ValidationError(f"replay needs 1 <= batch_size <= capacity, got {batch_size}, {capacity}")
        self.capacity = capacity
        self.batch_size = batch_size
        self._items: deque[Transition] = deque(maxlen=capacity)

    def __len__(self):
        return len(self._items)

    def add(self, t: Transition) -> None:
        self._items.append(t)

    @property
    def ready(self) -> bool:
        return len(self._items) >= self.batch_size

    def sample(self, rng: np.random.Generator) -> list[Transition]:
        """Draw ``batch_size`` distinct transitions uniformly."""
        if not self.ready:
            raise PreconditionError(
                f"replay buffer holds {len(self._items)} transitions, batch needs {self.batch_size}"
            )
        picks = rng.choice(len(self._items), size=self.batch_size, replace=False)
        return [self._items[int(i)] for i in picks]


# -- single updates ------------------------------------------------------------


def semi_gradient(topology: Topology, theta: np.ndarray, mdp: Mdp, x: int, a: int,
                  r: float, y: int) -> np.ndarray:
    """``(r + alpha max_a' Q(y, a') - Q(x, a)) * grad Q(x, a)`` at ``theta``."""
    trace = forward(topology, theta, mdp.states[x])
    target = r + mdp.discount * float(np.max(q_values(topology, theta, mdp.states[y])))
    return (target - trace.q[a]) * q_gradient(topology, theta, mdp.states[x], a, trace)


def expected_semi_gradient(topology: Topology, theta: np.ndarray, mdp: Mdp, x: int, a: int) -> np.ndarray:
    """Semi-gradient with the next-state max averaged over ``p(.|x, a)``."""
    trace = forward(topology, theta, mdp.states[x])
    emax = expected_max_q(mdp, x, a, lambda s: q_values(topology, theta, mdp.states[s]))
    target = float(mdp.reward[x, a]) + mdp.discount * emax
    return (target - trace.q[a]) * q_gradient(topology, theta, mdp.states[x], a, trace)


def _apply(theta, gamma, direction, step=-1):
    new = theta + gamma * direction
    if not np.all(np.isfinite(new)):
        raise DivergenceError("non-finite weights after update", step)
    return new


def step_online(topology: Topology, theta: np.ndarray, transition, gamma: float, mdp: Mdp) -> np.ndarray:
    """One sampled-target update on ``transition = (x, a, r, y)``."""
    x, a, r, y = _unpack(transition)
    mdp.check_pair(x, a)
    return _apply(theta, gamma, semi_gradient(topology, theta, mdp, x, a, r, y))


def step_expected(topology: Topology, theta: np.ndarray, x: int, a: int, mdp: Mdp, gamma: float) -> np.ndarray:
    """One update with the exact expected target."""
    mdp.check_pair(x, a)
    return _apply(theta, gamma, expected_semi_gradient(topology, theta, mdp, x, a))


def batch_direction(topology: Topology, theta: np.ndarray, mdp: Mdp, batch) -> np.ndarray:
    """Mean of the per-transition semi-gradients.

    Forwards and gradients are cached per state and pair; each entry is the
    same arithmetic :func:`semi_gradient` performs, so results match it bit
    for bit.
    """
    qmax, pairs = {}, {}
    grads = []
    for t in batch:
        x, a, r, y = _unpack(t)
        if y not in qmax:
            qmax[y] = float(np.max(q_values(topology, theta, mdp.states[y])))
        if (x, a) not in pairs:
            trace = forward(topology, theta, mdp.states[x])
            pairs[x, a] = (trace.q[a], q_gradient(topology, theta, mdp.states[x], a, trace))
        q, g = pairs[x, a]
        grads.append((r + mdp.discount * qmax[y] - q) * g)
    return np.sum(grads, axis=0) / len(grads)


def step_replay(topology: Topology, theta: np.ndarray, buffer: ReplayBuffer, gamma: float,
                rng: np.random.Generator, mdp: Mdp) -> tuple[np.ndarray, list[Transition]]:
    """Average the semi-gradients of a sampled mini-batch and take one step."""
    batch = buffer.sample(rng)
    return _apply(theta, gamma, batch_direction(topology, theta, mdp, batch)), batch


def _unpack(t):
    if isinstance(t, Transition):
        return t.x, t.a, t.r, t.y
    x, a, r, y = t
    return int(x), int(a), float(r), int(y)


# -- records -------------------------------------------------------------------

RECORD_HEADER = ["n", "state", "action", "reward", "next_state", "step_size", "epsilon",
                 "tie", "checkpoint", "batch"]


@dataclass
class TrainRecord:
    """Per-step log of a run, stored column-wise.

    ``batch`` is ``None`` for non-replay runs; otherwise a list with one
    tuple of sampled step indices per step (empty while the buffer fills).
    """

    mode: str
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    step_sizes: np.ndarray
    epsilons: np.ndarray
    ties: np.ndarray
    batch: list | None = None
    checkpoint_steps: tuple = ()

    def __len__(self):
        return len(self.states)

    @classmethod
    def empty(cls, mode: str, replay: bool) -> "TrainRecord":
        z = np.zeros(0)
        zi = np.zeros(0, dtype=int)
        return cls(mode, zi, zi, z, zi, z, z, np.zeros(0, dtype=bool), [] if replay else None)

    def transition(self, n: int) -> Transition:
        return Transition(n, int(self.states[n]), int(self.actions[n]), float(self.rewards[n]),
                          int(self.next_states[n]))

    def batch_at(self, n: int) -> list[Transition]:
        if self.batch is None:
            return [self.transition(n)]
        return [self.transition(k) for k in self.batch[n]]

    def truncated(self, n: int) -> "TrainRecord":
        """The first ``n`` steps (what a run of length ``n`` would log)."""
        return TrainRecord(
            self.mode, self.states[:n], self.actions[:n], self.rewards[:n], self.next_states[:n],
            self.step_sizes[:n], self.epsilons[:n], self.ties[:n],
            None if self.batch is None else self.batch[:n],
            tuple(s for s in self.checkpoint_steps if s <= n),
        )

    def to_csv(self, path, config_hash: str | None = None) -> None:
        ckpt = set(self.checkpoint_steps)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if config_hash is not None:
                w.writerow(["# config_hash=" + config_hash])
            w.writerow(["# mode=" + self.mode])
            w.writerow(RECORD_HEADER)
            for n in range(len(self)):
                batch = "" if self.batch is None else ";".join(str(k) for k in self.batch[n])
                w.writerow([
                    n, int(self.states[n]), int(self.actions[n]), repr(float(self.rewards[n])),
                    int(self.next_states[n]), repr(float(self.step_sizes[n])),
                    repr(float(self.epsilons[n])), int(self.ties[n]),
                    ";".join(str(k) for k in (n, n + 1) if k in ckpt and (k == n or k == len(self))),
                    batch,
                ])

    @classmethod
    def from_csv(cls, path) -> "TrainRecord":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        meta = {}
        skipped = 0
        while rows and rows[0] and rows[0][0].startswith("# "):
            key, _, value = rows.pop(0)[0][2:].partition("=")
            meta[key] = value
            skipped += 1
        if "mode" not in meta:
            raise ValidationError(f"{path}: missing '# mode=' header line")
        mode = meta["mode"]
        if not rows or rows[0] != RECORD_HEADER:
            raise ValidationError(f"{path}: line {skipped + 1}: unexpected header {rows[0] if rows else None}")
        body = rows[1:]
        replay = mode == "replay"
        cols = list(zip(*body)) if body else [()] * len(RECORD_HEADER)
        for i, row in enumerate(body):
            if int(row[0]) != i:
                raise ValidationError(f"{path}: line {i + skipped + 2}: step index {row[0]} out of order")
        batch = None
        if replay:
            batch = [tuple(int(k) for k in b.split(";")) if b else () for b in cols[9]]
        return cls(
            mode,
            np.array(cols[1], dtype=int), np.array(cols[2], dtype=int),
            np.array(cols[3], dtype=float), np.array(cols[4], dtype=int),
            np.array(cols[5], dtype=float), np.array(cols[6], dtype=float),
            np.array(cols[7], dtype=int).astype(bool), batch,
            tuple(int(k) for c in cols[8] if c for k in c.split(";")),
        )


# -- run configuration ---------------------------------------------------------

_SECTIONS = {
    "env": {"path", "benchmark", "benchmark_args", "initial_state"},
    "network": {"hidden", "output_widths", "activation", "initializer", "initializer_args", "seed"},
    "schedule": {"c", "n0", "p"},
    "policy": {"mode", "epsilon0", "decay", "floor"},
    "replay": {"enabled", "capacity", "batch_size"},
    "run": {"steps", "update", "checkpoint_every", "divergence_guard"},
}


@dataclass
class RunConfig:
    env: dict
    network: dict
    schedule: dict
    policy: dict
    replay: dict = field(default_factory=lambda: {"enabled": False})
    run: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "RunConfig":
        if not isinstance(d, dict):
            raise ValidationError("config: top level must be an object")
        unknown = d.keys() - _SECTIONS.keys()
        if unknown:
            raise ValidationError(f"config: unknown sections {sorted(unknown)}")
        for sec in ("env", "network", "schedule", "policy"):
            if sec not in d:
                raise ValidationError(f"config: missing section '{sec}'")
        for sec, body in d.items():
            if not isinstance(body, dict):
                raise ValidationError(f"config.{sec}: expected an object")
            bad = body.keys() - _SECTIONS[sec]
            if bad:
                raise ValidationError(f"config.{sec}: unknown keys {sorted(bad)}")
        cfg = cls(**{k: dict(v) for k, v in d.items()})
        if base_dir is not None and "path" in cfg.env:
            p = Path(cfg.env["path"])
            if not p.is_absolute():
                cfg.env["path"] = str((Path(base_dir) / p).resolve())
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items()}

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    # typed views -----------------------------------------------------------

    def validate(self) -> None:
        env = self.env
        if ("path" in env) == ("benchmark" in env):
            raise ValidationError("config.env: give exactly one of 'path' or 'benchmark'")
        if "benchmark" in env and env["benchmark"] not in envs.BENCHMARKS:
            raise ValidationError(f"config.env.benchmark: unknown benchmark {env['benchmark']!r}")
        for key in ("hidden", "output_widths", "seed"):
            if key not in self.network:
                raise ValidationError(f"config.network: missing '{key}'")
        try:
            self.step_schedule()
            self.policy_config()
        except TypeError as exc:
            raise ValidationError(f"config: {exc}") from None
        self.topology_for(1, len(self.network["output_widths"]))
        rep = self.replay
        if rep.get("enabled", False):
            ReplayBuffer(int(rep.get("capacity", 0)), int(rep.get("batch_size", 0)))
        run = self.run
        if int(run.get("steps", 0)) < 0:
            raise ValidationError("config.run.steps must be >= 0")
        if run.get("update", "online") not in ("online", "expected"):
            raise ValidationError("config.run.update must be 'online' or 'expected'")
        if rep.get("enabled", False) and run.get("update", "online") != "online":
            raise ValidationError("config: replay requires run.update = 'online'")
        if int(run.get("checkpoint_every", 1000)) < 1:
            raise ValidationError("config.run.checkpoint_every must be >= 1")
        if not float(run.get("divergence_guard", 1e6)) > 0:
            raise ValidationError("config.run.divergence_guard must be > 0")
        if self.network.get("initializer", "uniform_fan_in") not in ("uniform_fan_in", "suppress_action"):
            raise ValidationError(f"config.network.initializer: unknown {self.network['initializer']!r}")
        seed = self.network["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
            raise ValidationError("config.network.seed must be an unsigned 64-bit integer")

    def step_schedule(self) -> StepSchedule:
        s = self.schedule
        return StepSchedule(float(s["c"]), float(s.get("n0", 1.0)), float(s.get("p", 1.0)))

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(**self.policy)

    def topology_for(self, input_dim: int, n_actions: int) -> Topology:
        net = self.network
        outs = tuple(net["output_widths"])
        if len(outs) != n_actions:
            raise ValidationError(
                f"config.network.output_widths: {len(outs)} sublayers for an MDP with {n_actions} actions"
            )
        return Topology(input_dim, tuple(net["hidden"]), outs, net.get("activation", "tanh"))

    def load_env(self) -> Mdp:
        env = self.env
        if "path" in env:
            mdp = envs.load_mdp(env["path"])
        else:
            mdp = envs.BENCHMARKS[env["benchmark"]](**env.get("benchmark_args", {}))
        if "initial_state" in env:
            x0 = env["initial_state"]
            if not isinstance(x0, int) or not 0 <= x0 < mdp.n_states:
                raise ValidationError(f"config.env.initial_state: {x0!r} is not a state index")
            init = np.zeros(mdp.n_states)
            init[x0] = 1.0
            mdp = mdp.with_initial(init)
        return mdp

    @property
    def steps(self) -> int:
        return int(self.run.get("steps", 0))

    @property
    def seed(self) -> int:
        return int(self.network["seed"])

    def with_seed(self, seed: int) -> "RunConfig":
        d = self.to_dict()
        d["network"]["seed"] = int(seed)
        return RunConfig.from_dict(d)


# -- training loop ---------------------------------------------------------------


@dataclass
class TrainResult:
    status: str                       # "completed" | "diverged"
    record: TrainRecord
    checkpoints: dict                 # step -> theta (float64 copy)
    theta: np.ndarray                 # last valid iterate
    topology: Topology
    mdp: Mdp
    failed_step: int | None = None
    rng_states: dict = field(default_factory=dict)  # step -> stream states


def make_streams(seed: int):
    """Independent init/env/policy/replay generators from one seed."""
    children = np.random.SeedSequence(seed).spawn(4)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def _stream_states(env_rng, pol_rng, rep_rng):
    return {"env": env_rng.bit_generator.state, "policy": pol_rng.bit_generator.state,
            "replay": rep_rng.bit_generator.state}


def initial_theta(config: RunConfig, topology: Topology) -> np.ndarray:
    init_rng = make_streams(config.seed)[0]
    net = config.network
    return initialize(topology, net.get("initializer", "uniform_fan_in"), init_rng,
                      **net.get("initializer_args", {}))


def train(config: RunConfig, mdp: Mdp | None = None, theta0: np.ndarray | None = None) -> TrainResult:
    """Run ``config.run.steps`` updates from the configured initializer.

    Each step: act on ``Q(x_n, . ; theta_n)``, sample ``x_{n+1}``, update
    with the configured rule, then check ``||theta_{n+1}||_2`` against the
    divergence guard.  Checkpoints hold ``theta_n`` *before* update ``n``
    at multiples of ``checkpoint_every`` and at the final step.
    """
    if mdp is None:
        mdp = config.load_env()
    topology = config.topology_for(mdp.state_dim, mdp.n_actions)
    init_rng, env_rng, pol_rng, rep_rng = make_streams(config.seed)
    theta = check_theta(topology, theta0).copy() if theta0 is not None else initial_theta(config, topology)
    schedule = config.step_schedule()
    policy = config.policy_config()
    steps = config.steps
    update = config.run.get("update", "online")
    every = int(config.run.get("checkpoint_every", 1000))
    guard = float(config.run.get("divergence_guard", 1e6))
    rep = config.replay
    buffer = ReplayBuffer(int(rep["capacity"]), int(rep["batch_size"])) if rep.get("enabled") else None
    mode = "replay" if buffer is not None else update

    states = np.zeros(steps, dtype=int)
    actions = np.zeros(steps, dtype=int)
    rewards = np.zeros(steps)
    nexts = np.zeros(steps, dtype=int)
    gammas = np.zeros(steps)
    epsilons = np.zeros(steps)
    ties = np.zeros(steps, dtype=bool)
    batches = [] if buffer is not None else None
    checkpoints = {}
    rng_states = {}

    x = int(env_rng.choice(mdp.n_states, p=mdp.initial_dist))
    status, failed = "completed", None
    n = 0
    for n in range(steps):
        if n % every == 0:
            checkpoints[n] = theta.copy()
            rng_states[n] = _stream_states(env_rng, pol_rng, rep_rng)
        eps = policy.epsilon(n)
        trace = forward(topology, theta, mdp.states[x])
        a, tie = _choose(trace.q, eps, pol_rng)
        y, r = sample_transition(mdp, x, a, env_rng)
        gamma = schedule(n)
        if buffer is not None:
            buffer.add(Transition(n, x, a, r, y))
            if buffer.ready:
                batch = buffer.sample(rep_rng)
                direction = batch_direction(topology, theta, mdp, batch)
                batches.append(tuple(t.index for t in batch))
            else:
                direction = None
                batches.append(())
        elif update == "expected":
            direction = expected_semi_gradient(topology, theta, mdp, x, a)
        else:
            target = r + mdp.discount * float(np.max(q_values(topology, theta, mdp.states[y])))
            direction = (target - trace.q[a]) * q_gradient(topology, theta, mdp.states[x], a, trace)

        states[n], actions[n], rewards[n], nexts[n] = x, a, r, y
        gammas[n], epsilons[n], ties[n] = gamma, eps, tie
        if direction is not None:
            new = theta + gamma * direction
            norm = float(np.linalg.norm(new))
            if not math.isfinite(norm) or norm > guard:
                status, failed = "diverged", n
                break
            theta = new
        x = y
    else:
        n = steps

    if status == "diverged":
        kept = failed + 1
        states, actions, rewards, nexts = states[:kept], actions[:kept], rewards[:kept], nexts[:kept]
        gammas, epsilons, ties = gammas[:kept], epsilons[:kept], ties[:kept]
    else:
        checkpoints[steps] = theta.copy()
        rng_states[steps] = _stream_states(env_rng, pol_rng, rep_rng)
    record = TrainRecord(mode, states, actions, rewards, nexts, gammas, epsilons, ties, batches,
                         tuple(sorted(checkpoints)))
    return TrainResult(status, record, checkpoints, theta, topology, mdp, failed, rng_states)


def write_run(result: TrainResult, out_dir, config_hash: str | None = None) -> dict:
    """Write record CSV and checkpoint files; return their paths."""
    out = Path(out_dir)
    ck_dir = out / "checkpoints"
    ck_dir.mkdir(parents=True, exist_ok=True)
    paths = {"record": str(out / "record.csv"), "checkpoints": []}
    try:
        result.record.to_csv(out / "record.csv", config_hash)
        for step, theta in sorted(result.checkpoints.items()):
            p = ck_dir / f"step_{step:09d}.json"
            save_checkpoint(p, result.topology, theta, step, result.rng_states.get(step))
            paths["checkpoints"].append(str(p))
    except OSError as exc:
        raise InputError(f"{exc.filename}: cannot write run artifact ({exc.strerror})") from None
    return paths


def replay_update(topology: Topology, theta: np.ndarray, record: TrainRecord, n: int, mdp: Mdp) -> np.ndarray:
    """Recompute ``theta_{n+1}`` from ``theta_n`` and the logged step ``n``.

    Bit-identical to what :func:`train` computed, because it runs the same
    arithmetic on the same inputs.
    """
    gamma = float(record.step_sizes[n])
    if record.mode == "replay":
        idx = record.batch[n]
        if not idx:
            return theta
        direction = batch_direction(topology, theta, mdp, [record.transition(k) for k in idx])
    elif record.mode == "expected":
        direction = expected_semi_gradient(topology, theta, mdp, int(record.states[n]), int(record.actions[n]))
    else:
        t = record.transition(n)
        trace = forward(topology, theta, mdp.states[t.x])
        target = t.r + mdp.discount * float(np.max(q_values(topology, theta, mdp.states[t.y])))
        direction = (target - trace.q[t.a]) * q_gradient(topology, theta, mdp.states[t.x], t.a, trace)
    return theta + gamma * direction
