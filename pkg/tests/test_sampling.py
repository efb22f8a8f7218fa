import numpy as np
import pytest

from cmpg.game import GameSpec, JointPolicy, exact_policy_gradient, exact_value
from cmpg.sampling import (
    PER_TRAJECTORY,
    PRODUCT_OF_MEANS,
    RngStream,
    ScoreUndefinedError,
    estimate_all,
    estimate_batch,
    format_trajectory,
    load_trajectories,
    dump_trajectories,
    parse_trajectory,
    sample_episode,
    score_sums,
    simulate_batch,
)

from conftest import random_game, random_policy_for


def constant_stop_game(kappa, S=2):
    return random_game(0, S=S, gamma=1.0 - kappa)


def test_immediate_stop_gives_length_one():
    spec = constant_stop_game(1.0)
    batch = simulate_batch(spec, JointPolicy.uniform(spec), 500, RngStream(1))
    assert np.all(batch.lengths == 1)


def test_fixed_horizon_length():
    spec = random_game(0, horizon=10)
    batch = simulate_batch(spec, JointPolicy.uniform(spec), 300, RngStream(2))
    assert np.all(batch.lengths == 10)
    assert len(sample_episode(spec, JointPolicy.uniform(spec), RngStream(3))) == 10


def test_geometric_episode_length():
    spec = constant_stop_game(0.1)
    lengths = simulate_batch(spec, JointPolicy.uniform(spec), 100_000, RngStream(4)).lengths
    se = lengths.std(ddof=1) / np.sqrt(lengths.size)
    assert abs(lengths.mean() - 10.0) <= 3 * se


def test_same_stream_same_batch():
    spec = random_game(3)
    pi = random_policy_for(spec, 3)
    a = simulate_batch(spec, pi, 50, RngStream(7, ("x", 1)))
    b = simulate_batch(spec, pi, 50, RngStream(7, ("x", 1)))
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.actions, b.actions)
    c = simulate_batch(spec, pi, 50, RngStream(7, ("x", 2)))
    assert not np.array_equal(a.states, c.states)


def test_environment_stream_is_shared():
    # initial states come from the environment substream only, so they do not
    # depend on what the agents play
    spec = random_game(5)
    a = simulate_batch(spec, random_policy_for(spec, 1), 200, RngStream(9))
    b = simulate_batch(spec, random_policy_for(spec, 2), 200, RngStream(9))
    np.testing.assert_array_equal(a.states[:, 0], b.states[:, 0])


def test_zero_rewards_give_zero_gradient():
    spec = random_game(1)
    spec = spec.with_payoffs(rewards=np.zeros_like(spec.rewards))
    est = estimate_batch(spec, JointPolicy.uniform(spec), 0, 200, RngStream(0))
    assert est.value_reward == 0.0
    assert np.all(est.grad_reward == 0.0)


def test_single_state_value_estimate():
    spec = GameSpec((1,), [[[1.0]]], [[2.0]], np.inf, [1.0], [[[0.8]]], [[0.2]])
    est = estimate_batch(spec, JointPolicy.uniform(spec), 0, 10_000, RngStream(11))
    assert abs(est.value_reward - 5.0) <= 3 * est.se_value_reward
    assert abs(est.value_cost - 10.0) <= 3 * est.se_value_cost


def _per_episode_products(spec, pi, batch, agent):
    """Per-episode ``R * psi`` and the past-return offset ``sum_t 1{s_t = s} R_{<t}``."""
    psi = score_sums(spec, pi, batch, agent)
    R = batch.returns[agent]
    step_r = spec.rewards[agent][batch.states, batch.joint] * batch.alive
    past = np.cumsum(step_r, axis=1) - step_r
    onehot = (batch.states[:, :, None] == np.arange(spec.num_states)) & batch.alive[:, :, None]
    offset = (onehot * past[:, :, None]).sum(axis=1)  # (B, S)
    return R[:, None, None] * psi, offset


@pytest.mark.parametrize("seed", range(3))
def test_full_return_estimator_decomposes_into_gradient_plus_row_offset(seed):
    # E[R psi(s,a)] = d(s) Qbar(s,a) + sum_t E[R_{<t} 1{s_t=s}]; the second term is
    # constant along each row, i.e. normal to the simplex
    spec = random_game(seed, S=2)
    pi = random_policy_for(spec, 40 + seed, xi=0.2)
    batch = simulate_batch(spec, pi, 10_000, RngStream(seed, ("grad",)))
    for i in range(spec.num_agents):
        prod, offset = _per_episode_products(spec, pi, batch, i)
        corrected = prod - offset[:, :, None]
        se = corrected.std(axis=0, ddof=1) / np.sqrt(batch.size)
        exact = exact_policy_gradient(spec, pi, i, i)
        assert np.all(np.abs(corrected.mean(axis=0) - exact) <= 3 * se)


@pytest.mark.parametrize("seed", range(3))
def test_per_trajectory_gradient_tangent_component(seed):
    spec = random_game(seed, S=2)
    pi = random_policy_for(spec, 40 + seed, xi=0.2)
    batch = simulate_batch(spec, pi, 10_000, RngStream(seed, ("grad",)))
    for i in range(spec.num_agents):
        prod, _ = _per_episode_products(spec, pi, batch, i)
        centred = prod - prod.mean(axis=2, keepdims=True)
        se = centred.std(axis=0, ddof=1) / np.sqrt(batch.size)
        exact = exact_policy_gradient(spec, pi, i, i)
        exact_c = exact - exact.mean(axis=1, keepdims=True)
        assert np.all(np.abs(centred.mean(axis=0) - exact_c) <= 3 * se)
        est = estimate_all(spec, pi, 10_000, RngStream(seed, ("grad",)), PER_TRAJECTORY)[i]
        np.testing.assert_allclose(est.grad_reward, prod.mean(axis=0), rtol=1e-12)


def test_cost_value_unbiased_over_batches():
    spec = random_game(6, S=3)
    pi = random_policy_for(spec, 6, xi=0.1)
    exact = exact_value(spec, pi, "cost").value
    means = [simulate_batch(spec, pi, 1000, RngStream(6, ("rep", r))).cost_returns.mean() for r in range(30)]
    se = np.std(means, ddof=1) / np.sqrt(len(means))
    assert abs(np.mean(means) - exact) <= 4 * se


def test_product_of_means_sign_follows_mean_return():
    spec = random_game(2)
    pi = random_policy_for(spec, 2, xi=0.2)
    batch = simulate_batch(spec, pi, 300, RngStream(12))
    est = estimate_batch(spec, pi, 0, 300, RngStream(12), PRODUCT_OF_MEANS)
    visited = score_sums(spec, pi, batch, 0).sum(axis=0) > 0
    assert np.all(np.sign(est.grad_reward[visited]) == np.sign(est.value_reward))


def test_second_moment_shrinks_with_floor():
    spec = random_game(8, S=2)
    base = JointPolicy.deterministic(spec, [[0, 0], [1, 0]])
    moments = []
    for xi in (0.05, 0.2, 0.6):
        pi = JointPolicy(tuple(xi / 2 + (1 - xi) * t for t in base.tables), xi)
        batch = simulate_batch(spec, pi, 4000, RngStream(13, ("xi", xi)))
        psi = score_sums(spec, pi, batch, 0)
        g = batch.returns[0][:, None, None] * psi
        moments.append(float((g ** 2).sum(axis=(1, 2)).mean()))
    assert np.all(np.isfinite(moments))
    assert moments[0] > moments[1] > moments[2]


def test_zero_probability_sample_raises():
    spec = random_game(0)
    pi = JointPolicy.uniform(spec)
    batch = simulate_batch(spec, pi, 100, RngStream(0))
    broken = pi.replace(0, np.tile([1.0, 0.0], (spec.num_states, 1)))
    with pytest.raises(ScoreUndefinedError):
        score_sums(spec, broken, batch, 0)


def test_trajectory_dump_roundtrip(tmp_path):
    spec = random_game(4)
    pi = random_policy_for(spec, 4)
    trajs = [sample_episode(spec, pi, RngStream(4, ("ep", k))) for k in range(5)]
    path = tmp_path / "traj.txt"
    dump_trajectories(trajs, path)
    back = load_trajectories(path)
    assert len(back) == 5
    for a, b in zip(trajs, back):
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_array_equal(a.rewards, b.rewards)
        np.testing.assert_array_equal(a.costs, b.costs)
    line = format_trajectory(trajs[0])
    assert parse_trajectory(line).states.tolist() == trajs[0].states.tolist()
