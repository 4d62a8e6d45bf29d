import numpy as np
import pytest

from dqnlab.trainer import RunConfig


def fd_gradient(f, theta, h=1e-5):
    """Central differences, one coordinate at a time."""
    g = np.zeros_like(theta)
    for i in range(len(theta)):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def make_config(benchmark="chain", steps=500, seed=0, hidden=(4,), widths=None, activation="tanh",
                schedule=None, policy=None, replay=None, run=None, env=None, network=None):
    n_actions = {"single": 1}.get(benchmark, 2)
    d = {
        "env": {"benchmark": benchmark, **(env or {})},
        "network": {"hidden": list(hidden), "output_widths": list(widths or [3] * n_actions),
                    "activation": activation, "seed": seed, **(network or {})},
        "schedule": schedule or {"c": 0.5, "n0": 10, "p": 0.6},
        "policy": policy or {"epsilon0": 1.0, "decay": 0.999, "floor": 0.05},
        "run": {"steps": steps, "checkpoint_every": 100, **(run or {})},
    }
    if replay is not None:
        d["replay"] = replay
    return RunConfig.from_dict(d)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
