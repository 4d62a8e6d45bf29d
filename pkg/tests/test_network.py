import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dqnlab.errors import InputError, NumericalError, ValidationError
from dqnlab.network import (ACTIVATIONS, Topology, activation, forward, initialize, load_checkpoint,
                            q_bound_check, q_gradient, q_table, q_values, save_checkpoint,
                            suppress_action_init, tabular_weights, uniform_fan_in_init)
from conftest import fd_gradient


def naive_q(topology, theta, x, a):
    """Straight-line forward pass written from the layout description."""
    hidden, sub = topology.unpack(theta)
    h = np.asarray(x, float)
    for k, W in enumerate(hidden):
        h = activation(topology.activations[k]).fn(W @ h)
    W_a, th_a = sub[a]
    return float(th_a @ activation(topology.activations[-1]).fn(W_a @ h))


topologies = st.builds(
    lambda d, hidden, outs, act: Topology(d, tuple(hidden), tuple(outs), act),
    st.integers(1, 4),
    st.lists(st.integers(1, 5), max_size=2),
    st.lists(st.integers(1, 4), min_size=1, max_size=3),
    st.sampled_from(sorted(ACTIVATIONS)),
)


# -- activations ----------------------------------------------------------------------


def test_activation_values_against_closed_forms():
    u = np.linspace(-6, 6, 25)
    assert np.allclose(activation("sigmoid").fn(u), 1 / (1 + np.exp(-u)))
    assert np.allclose(activation("tanh").fn(u), np.tanh(u))
    gelu = [v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in u]
    assert np.allclose(activation("gelu").fn(u), gelu, atol=1e-15)
    assert np.allclose(activation("silu").fn(u), u / (1 + np.exp(-u)))


@pytest.mark.parametrize("name", sorted(ACTIVATIONS))
def test_activation_derivatives(name):
    kind = activation(name)
    u = np.linspace(-5, 5, 41)
    h = 1e-6
    fd = (kind.fn(u + h) - kind.fn(u - h)) / (2 * h)
    assert np.allclose(kind.deriv(u), fd, atol=1e-8)


def test_unknown_activation():
    with pytest.raises(ValidationError, match="relu"):
        Topology(2, (3,), (2,), "relu")


# -- topology layout -------------------------------------------------------------------


def test_parameter_count():
    top = Topology(3, (4, 5), (2, 6))
    assert top.n_params == 3 * 4 + 4 * 5 + (5 * 2 + 2) + (5 * 6 + 6)


def test_indices_are_a_bijection():
    top = Topology(3, (4,), (2, 3))
    idx = [top.hidden_index(0, s, d) for s in range(3) for d in range(4)]
    for a, la in enumerate(top.output_widths):
        idx += [top.sublayer_index(a, u, s) for u in range(la) for s in range(4)]
        idx += [top.output_index(a, u) for u in range(la)]
    assert sorted(idx) == list(range(top.n_params))


def test_index_out_of_range():
    top = Topology(3, (4,), (2,))
    with pytest.raises(InputError):
        top.hidden_index(0, 3, 0)


def test_topology_round_trip():
    top = Topology(3, (4,), (2, 3), ("sigmoid", "tanh"))
    assert Topology.from_dict(top.to_dict()) == top


# -- forward and gradient -----------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(topologies, st.integers(0, 2**32 - 1))
def test_forward_matches_naive(top, seed):
    rng = np.random.default_rng(seed)
    theta = rng.normal(size=top.n_params)
    x = rng.normal(size=top.input_dim)
    q = q_values(top, theta, x)
    assert np.allclose(q, [naive_q(top, theta, x, a) for a in range(top.n_actions)], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(topologies, st.integers(0, 2**32 - 1))
def test_gradient_matches_finite_differences(top, seed):
    rng = np.random.default_rng(seed)
    theta = rng.normal(scale=0.8, size=top.n_params)
    x = rng.normal(size=top.input_dim)
    a = int(rng.integers(top.n_actions))
    g = q_gradient(top, theta, x, a)
    fd = fd_gradient(lambda th: q_values(top, th, x)[a], theta)
    assert np.linalg.norm(g - fd) <= 1e-6 * max(1.0, np.linalg.norm(fd))


def test_gradient_is_exactly_zero_off_action(rng):
    top = Topology(2, (3,), (2, 2, 2))
    theta = rng.normal(size=top.n_params)
    g = q_gradient(top, theta, rng.normal(size=2), 1)
    for a in (0, 2):
        assert np.all(g[top.action_slice(a)] == 0.0)


def test_zero_output_weights_give_zero_q():
    top = Topology(2, (3,), (2, 2))
    theta = np.ones(top.n_params)
    for a in range(2):
        theta[top.output_slice(a)] = 0.0
    assert np.all(q_values(top, theta, [0.3, -1.0]) == 0.0)


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_overflow_names_the_unit():
    top = Topology(1, (2,), (1,), "silu")
    theta = np.full(top.n_params, 1e200)
    with pytest.raises(NumericalError, match="unit"):
        forward(top, theta, [1e200])


def test_q_table_rows(rng):
    top = Topology(3, (4,), (2, 2))
    theta = rng.normal(size=top.n_params)
    states = rng.normal(size=(5, 3))
    assert np.array_equal(q_table(top, theta, states)[3], q_values(top, theta, states[3]))


# -- squashing bound ---------------------------------------------------------------------------


@pytest.mark.parametrize("act", ["sigmoid", "tanh"])
def test_bound_holds_on_random_probes(act, rng):
    top = Topology(3, (5,), (2, 4, 1), act)
    theta = rng.normal(scale=3.0, size=top.n_params)
    rep = q_bound_check(top, theta, rng.normal(scale=10, size=(2000, 3)))
    assert rep.ok and rep.squashing
    assert np.all(rep.max_abs_q <= rep.tight_bound + 1e-12)
    assert np.all(rep.tight_bound <= rep.bound)


def test_bound_is_tight_for_width_one():
    # tanh(W x) -> 1 for a huge pre-activation, so |Q| reaches |theta_a|
    top = Topology(1, (), (1,), "tanh")
    theta = np.array([50.0, -2.0])
    rep = q_bound_check(top, theta, [[1.0]])
    assert rep.max_abs_q[0] == pytest.approx(rep.bound[0])


def test_non_squashing_reports_constant_only(rng):
    top = Topology(2, (3,), (2,), "gelu")
    rep = q_bound_check(top, rng.normal(size=top.n_params), rng.normal(size=(10, 2)))
    assert not rep.squashing and rep.bound is None and rep.empirical_constant >= 0


# -- initializers --------------------------------------------------------------------------


def test_fan_in_init_range(rng):
    top = Topology(4, (9,), (16,))
    theta = uniform_fan_in_init(top, rng)
    assert np.all(np.abs(theta[:36]) <= 0.5)
    assert np.all(np.abs(theta[top.output_slice(0)]) <= 0.25)


def test_suppress_action_keeps_action_negative(rng):
    top = Topology(4, (6,), (3, 3), "sigmoid")
    theta = suppress_action_init(top, rng, action=1)
    q = q_table(top, theta, rng.normal(scale=5, size=(200, 4)))
    assert np.all(q[:, 1] < 0) and np.all(q[:, 0] > 0)


def test_initialize_dispatch(rng):
    top = Topology(2, (3,), (2, 2))
    with pytest.raises(ValidationError):
        initialize(top, "xavier", rng)


def test_tabular_weights_reproduce_table(rng):
    q = rng.normal(scale=3, size=(5, 2))
    top = Topology(5, (), (1, 1), "tanh")
    theta = tabular_weights(top, q)
    assert np.allclose(q_table(top, theta, np.eye(5)), q, atol=1e-12)


# -- checkpoints --------------------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    top = Topology(3, (4,), (2, 2), ("sigmoid", "tanh"))
    theta = rng.normal(size=top.n_params) * 1e-7 + np.pi
    save_checkpoint(tmp_path / "c.json", top, theta, 42, {"k": [1, 2]})
    top2, theta2, step, state = load_checkpoint(tmp_path / "c.json")
    assert top2 == top and step == 42 and state == {"k": [1, 2]}
    assert np.array_equal(theta2, theta)


def test_checkpoint_wrong_format(tmp_path):
    (tmp_path / "c.json").write_text('{"format": "other"}')
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "c.json")
