from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dqnlab.envs import chain_mdp, policy_kernel, reducible_mdp, stationary_distributions
from dqnlab.errors import InputError, ValidationError
from dqnlab.measure import (OccupationMeasure, TimeAxis, behaviour_policy, measure_at,
                            measure_distance, pushforward, stationarity_gap, stationarity_report,
                            step_measure, tail_estimate, tail_window, tv_distance, window_measure)
from dqnlab.network import Topology, tabular_weights, uniform_fan_in_init
from dqnlab.trainer import TrainRecord, train
from conftest import make_config


def synthetic(states, actions, gammas, batch=None):
    n = len(states)
    z = np.zeros(n)
    return TrainRecord("replay" if batch is not None else "online", np.array(states), np.array(actions), z,
                       np.zeros(n, dtype=int), np.array(gammas, dtype=float), z, np.zeros(n, dtype=bool), batch)


def oracle_window(states, actions, gammas, t0, t1, shape, batch=None):
    """Exact rational overlap weights, one interval at a time."""
    w = {}
    t = Fraction(0)
    for n, g in enumerate(gammas):
        lo, hi = t, t + Fraction(g)
        t = hi
        overlap = min(hi, Fraction(t1)) - max(lo, Fraction(t0))
        if overlap <= 0:
            continue
        pairs = [(states[k], actions[k]) for k in batch[n]] if batch and batch[n] else [(states[n], actions[n])]
        for p in pairs:
            w[p] = w.get(p, 0) + overlap / len(pairs)
    total = sum(w.values())
    out = np.zeros(shape)
    for (x, a), v in w.items():
        out[x, a] = float(v / total)
    return out


def test_time_axis_matches_cumulative_sum():
    axis = TimeAxis.from_steps([0.5, 0.25, 0.0, 0.125])
    assert axis.t.tolist() == [0.0, 0.5, 0.75, 0.75, 0.875]
    assert axis.step_at(0.0) == 0 and axis.step_at(0.5) == 1
    # step 2 has zero length, so time 0.75 belongs to step 3
    assert axis.step_at(0.75) == 3
    with pytest.raises(InputError):
        axis.step_at(0.875)
    with pytest.raises(ValidationError):
        TimeAxis.from_steps([0.1, -0.1])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 1), st.sampled_from([0.5, 0.25, 0.125, 0.0, 1.0])),
                min_size=1, max_size=30),
       st.floats(0, 1), st.floats(0, 1))
def test_window_measure_matches_exact_overlap(steps, u, v):
    states, actions, gammas = map(list, zip(*steps))
    end = sum(gammas)
    if end == 0:
        return
    t0, t1 = sorted((u * end, v * end))
    if t1 - t0 < 1e-9:
        return
    mdp = chain_mdp()
    got = window_measure(synthetic(states, actions, gammas), t0, t1, mdp).weights
    assert np.allclose(got, oracle_window(states, actions, gammas, t0, t1, (5, 2)), atol=1e-12)


def test_window_measure_with_batches():
    states, actions, gammas = [0, 1, 2, 3], [0, 1, 0, 1], [0.5, 0.25, 0.25, 0.5]
    batch = [(), (0, 1), (1, 2), (0, 2, 3)]
    got = window_measure(synthetic(states, actions, gammas, batch), 0.3, 1.4, chain_mdp()).weights
    assert np.allclose(got, oracle_window(states, actions, gammas, 0.3, 1.4, (5, 2), batch), atol=1e-12)


def test_window_average_of_pointwise_measure():
    # midpoint rule on a fine grid converges to the window measure
    rec = train(make_config(steps=300)).record
    mdp = chain_mdp()
    axis = TimeAxis.of(rec)
    t0, t1 = 0.2 * axis.end, 0.9 * axis.end
    grid = t0 + (np.arange(20000) + 0.5) * (t1 - t0) / 20000
    approx = sum(measure_at(rec, t, mdp, axis).weights for t in grid) / len(grid)
    assert measure_distance(OccupationMeasure(approx / approx.sum()), window_measure(rec, t0, t1, mdp)) < 5e-3


def test_measures_are_normalised():
    rec = train(make_config(steps=200, replay={"enabled": True, "capacity": 40, "batch_size": 7})).record
    mdp = chain_mdp()
    for n in (0, 6, 7, 150):
        assert step_measure(rec, n, 5, 2).weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert step_measure(rec, 150, 5, 2).support_size() <= 7
    m = tail_estimate(rec, 0.3, mdp)
    assert abs(m.weights.sum() - 1) < 1e-12 and np.all(m.weights >= 0)


def test_tail_window_bounds():
    axis = TimeAxis.from_steps([1.0] * 10)
    assert tail_window(axis, 0.2) == (8.0, 10.0)
    with pytest.raises(InputError):
        tail_window(axis, 0.0)
    with pytest.raises(InputError):
        tail_estimate(synthetic([], [], []), 0.2, chain_mdp())


def test_invalid_measures():
    with pytest.raises(ValidationError):
        OccupationMeasure(np.array([[0.5, 0.6]]))
    with pytest.raises(InputError):
        OccupationMeasure.dirac(5, 0, 5, 2)


def test_entropy_and_tv():
    m = OccupationMeasure(np.full((2, 2), 0.25))
    assert m.entropy() == pytest.approx(np.log(4))
    assert OccupationMeasure.dirac(0, 0, 2, 2).entropy() == 0.0
    assert tv_distance([1, 0], [0, 1]) == 1.0


def test_exact_stationary_distribution_has_zero_gap(rng):
    mdp = chain_mdp()
    top = Topology(5, (3,), (2, 2))
    theta = uniform_fan_in_init(top, rng)
    for eps in (0.0, 0.3, 1.0):
        fk = policy_kernel(mdp, behaviour_policy(top, theta, mdp, eps))
        for pi in stationary_distributions(fk):
            assert stationarity_gap(OccupationMeasure(np.outer(pi, [0.5, 0.5])), top, theta, mdp, eps) < 1e-12


def test_gap_of_point_mass_is_escape_probability():
    mdp = reducible_mdp()
    top = Topology(mdp.n_states, (), (1, 1))
    theta = tabular_weights(top, np.zeros((mdp.n_states, 2)))
    # uniform play from one state: gap is the mass that leaves it in one step
    x = 0
    leave = 1 - 0.5 * (mdp.transition_matrix[x, 0, x] + mdp.transition_matrix[x, 1, x])
    m = OccupationMeasure.dirac(x, 0, mdp.n_states, 2)
    assert stationarity_gap(m, top, theta, mdp, 1.0) == pytest.approx(leave, abs=1e-12)


def test_pushforward_matches_matrix_product(rng):
    mdp = chain_mdp()
    pi = rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states)
    fk = policy_kernel(mdp, pi)
    m = rng.dirichlet(np.ones(mdp.n_states))
    expected = [sum(m[x] * pi[x, a] * mdp.transition_matrix[x, a, y] for x in range(5) for a in range(2))
                for y in range(5)]
    assert np.allclose(pushforward(m, fk).mass, expected, atol=1e-14)


def test_behaviour_policy_rows():
    mdp = chain_mdp()
    top = Topology(5, (), (1, 1))
    q = np.array([[0.0, 1.0]] * 5)
    pi = behaviour_policy(top, tabular_weights(top, q), mdp, 0.2)
    assert np.allclose(pi, [[0.1, 0.9]] * 5)


def test_stationarity_report_uses_checkpoints_in_window():
    res = train(make_config(steps=1000))
    rep = stationarity_report(res.record, res.checkpoints, res.topology, res.mdp, 0.2)
    assert rep.checkpoint in res.checkpoints
    assert rep.gap == rep.sensitivity[1]
    assert rep.epsilon == res.record.epsilons[rep.checkpoint]
    assert all(0 <= g <= 1 for g in rep.sensitivity)
