import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmpg.csa import (
    COST,
    REWARD,
    CsaSchedules,
    GenericCsaProblem,
    InfeasibleStartError,
    InvalidFloorError,
    csa_generic,
    inner_step,
    project_floored_simplex,
    project_simplex,
    relaxed_feasible,
    required_iterations,
    run_inner_loop,
    select_index,
    theoretical_schedules,
)
from cmpg.environments import build_environment
from cmpg.game import JointPolicy, exact_value
from cmpg.iprox import exact_provider
from cmpg.sampling import RngStream


def test_projection_examples():
    np.testing.assert_allclose(project_floored_simplex(np.array([[2.0, 0.0]]), 0.0), [[1.0, 0.0]])
    np.testing.assert_allclose(project_floored_simplex(np.array([[1.0, 0.0]]), 0.2), [[0.9, 0.1]])


def test_projection_rejects_bad_floor():
    with pytest.raises(InvalidFloorError):
        project_floored_simplex(np.array([[0.5, 0.5]]), 1.5)


vectors = arrays(np.float64, st.integers(1, 6), elements=st.floats(-50, 50, allow_nan=False))


@settings(max_examples=200, deadline=None)
@given(y=vectors, xi=st.floats(0.0, 1.0))
def test_projection_lands_in_floored_simplex_and_is_idempotent(y, xi):
    p = project_floored_simplex(y[None], xi)[0]
    assert p.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(p >= xi / y.size - 1e-12)
    np.testing.assert_allclose(project_floored_simplex(p[None], xi)[0], p, atol=1e-10)


@settings(max_examples=100, deadline=None)
@given(y=vectors, xi=st.floats(0.0, 0.9), seed=st.integers(0, 1000))
def test_projection_variational_inequality(y, xi, seed):
    # <y - p, z - p> <= 0 for every z in the set
    p = project_floored_simplex(y[None], xi)[0]
    rng = np.random.default_rng(seed)
    z = xi / y.size + (1 - xi) * rng.dirichlet(np.ones(y.size), size=20)
    assert np.all((z - p) @ (y - p) <= 1e-8 * (1 + np.abs(y).max()))


def test_simplex_projection_of_feasible_point_is_identity():
    p = np.array([[0.2, 0.3, 0.5]])
    np.testing.assert_allclose(project_simplex(p), p)


def test_inner_step_hand_example():
    pi = np.array([[0.5, 0.5]])
    new, branch = inner_step(pi, pi, np.array([[1.0, 0.0]]), np.zeros((1, 2)), 0.0, 0.1, 0.0, eta=1.0, threshold=1.0)
    assert branch == REWARD
    np.testing.assert_allclose(new, [[0.45, 0.55]])


def test_switch_equality_takes_reward_branch():
    assert relaxed_feasible(11.0, 12.0, 1.0, 0.0)
    assert not relaxed_feasible(11.0 + 1e-9, 12.0, 1.0, 0.0)
    pi = np.array([[0.5, 0.5]])
    _, branch = inner_step(pi, pi, np.zeros((1, 2)), np.zeros((1, 2)), 13.0, 0.1, 0.0, eta=1.0, threshold=12.0)
    assert branch == COST


def test_required_iterations_example():
    assert required_iterations(1.0, 1.0, 1.0, 1.0, 1.0, 0.1) == pytest.approx(6400.0)
    sched = theoretical_schedules(1.0, 1.0, 1.0, 1.0, 1.0, 0.1, f_max=1.0)
    assert sched.K == 6400 and sched.window() == 3200


def test_noiseless_schedules_have_no_lambda():
    sched = theoretical_schedules(2.0, 2.0, 6.0, 4.0, 0.0, 0.1, K=100)
    assert sched.lam == 0.0 and sched.J == 1


def test_schedule_arguments_validated():
    with pytest.raises(ValueError):
        theoretical_schedules(1.0, 1.0, 1.0, 1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        CsaSchedules(K=10)
    with pytest.raises(ValueError):
        CsaSchedules(K=10, nu=-1.0)


def test_step_and_tolerance_formulas():
    sched = CsaSchedules(K=50, mu_F=2.0, mu_G=4.0, M=3.0, diameter=1.5)
    k = 7
    assert sched.step_size(k, REWARD) == pytest.approx(2.0 / (2.0 * 8))
    assert sched.step_size(k, COST) == pytest.approx(2.0 / (4.0 * 8))
    expected = (4 * 1.5 ** 2 / k + 16 * 9.0 / 4.0) * 4.0 / (2 * k)
    assert sched.tolerance(k, COST) == pytest.approx(expected)


@pytest.mark.parametrize("mu", [0.5, 2.0, 7200.0])
def test_weights_grow_linearly_with_equal_moduli(mu):
    # a_k = 2/(k+1) gives A_k = 2/(k(k+1)) and rho_k = k/mu
    sched = CsaSchedules(K=40, mu_F=mu, mu_G=mu, M=1.0, diameter=1.0)
    rho = sched.weights([REWARD, COST] * 20)
    np.testing.assert_allclose(rho, np.arange(1, 41) / mu, rtol=1e-10)


def test_select_index_empty_window_returns_one():
    k, members = select_index([5.0, 5.0], [0.0, 0.0], [1.0, 1.0], 0, np.random.default_rng(0), first=1)
    assert k == 1 and members == []


def test_select_index_respects_weights():
    rng = np.random.default_rng(0)
    draws = [select_index([0, 0, 0], [1, 1, 1], [1.0, 2.0, 7.0], 1, rng, first=1)[0] for _ in range(20_000)]
    freq = np.bincount(draws, minlength=4)[1:] / len(draws)
    np.testing.assert_allclose(freq, [0.1, 0.2, 0.7], atol=0.015)


def test_select_index_window_start():
    k, members = select_index([0, 0, 0, 0], [1, 1, 1, 1], [1, 1, 1, 1], 3, np.random.default_rng(1), first=1)
    assert members == [3, 4] and k in members


def _quadratic_problem():
    return GenericCsaProblem(
        objective_grad=lambda x, rng: 2 * x,
        constraint_grad=lambda x, rng: 2 * (x - 1),
        constraint_value=lambda x, rng: float((x[0] - 1) ** 2 - 0.25),
        x0=np.array([1.0]),
        mu_F=2.0, mu_G=2.0, M=6.0, diameter=4.0, lower=-2.0, upper=2.0,
        objective=lambda x: float(x[0] ** 2),
        constraint=lambda x: float((x[0] - 1) ** 2 - 0.25),
    )


def test_generic_solver_approaches_constrained_minimiser():
    res = csa_generic(_quadratic_problem(), theoretical_schedules(2, 2, 6, 4, 0, 0.1, K=4000), RngStream(0))
    assert abs(res.x[0] - 0.5) < 0.05
    assert res.k_hat in res.window
    assert all(res.branches[k - 1] == REWARD for k in res.window)


def test_generic_solver_rejects_infeasible_start():
    prob = _quadratic_problem()
    prob.x0 = np.array([-2.0])
    with pytest.raises(InfeasibleStartError):
        csa_generic(prob, theoretical_schedules(2, 2, 6, 4, 0, 0.1, K=10), RngStream(0), eps=0.1)


def test_generic_solver_is_deterministic():
    sched = theoretical_schedules(2, 2, 6, 4, 0, 0.1, K=300)
    a = csa_generic(_quadratic_problem(), sched, RngStream(3))
    b = csa_generic(_quadratic_problem(), sched, RngStream(3))
    assert a.k_hat == b.k_hat
    np.testing.assert_array_equal(a.iterates, b.iterates)


def _tiny_game(threshold):
    spec, _ = build_environment("random_identical", seed=3, S=2, A=2, threshold=threshold)
    return spec


def test_inner_loop_cost_branch_when_infeasible():
    spec = _tiny_game(0.5)  # uniform policy costs more than 0.5
    anchor = JointPolicy.uniform(spec)
    assert exact_value(spec, anchor, "cost").value > 0.5
    sched = CsaSchedules(K=5, nu=0.01, output="last")
    res = run_inner_loop(anchor, exact_provider(spec), sched, 0.1, spec.threshold, 0.0, RngStream(0))
    assert res.records[0].branch == COST
    assert res.k_hat == 5


def test_inner_loop_reward_branch_without_constraint():
    spec = _tiny_game(math.inf)
    anchor = JointPolicy.uniform(spec)
    sched = CsaSchedules(K=8, nu=0.01, output="last")
    res = run_inner_loop(anchor, exact_provider(spec), sched, 0.1, spec.threshold, 0.2, RngStream(0))
    assert all(r.branch == REWARD for r in res.records)
    assert res.cost_branch_fraction == 0.0
    assert not res.policy.violations(spec)
    # minimisation: the common value does not increase
    assert exact_value(spec, res.policy, 0).value <= exact_value(spec, anchor, 0).value + 1e-12


def test_inner_loop_sample_output_uses_shared_index():
    spec = _tiny_game(math.inf)
    anchor = JointPolicy.uniform(spec)
    sched = CsaSchedules(K=10, mu_F=1.0, mu_G=1.0, M=1.0, diameter=1.0, output="sample")
    kw = dict(eta=0.1, threshold=spec.threshold, xi=0.0, membership="relaxed", keep_iterates=True)
    a = run_inner_loop(anchor, exact_provider(spec), sched, index_stream=RngStream(5, ("idx",)), **kw)
    b = run_inner_loop(anchor, exact_provider(spec), sched, index_stream=RngStream(5, ("idx",)), **kw)
    assert a.k_hat == b.k_hat
    assert a.window == list(range(5, 11))
    for i in range(spec.num_agents):
        np.testing.assert_array_equal(a.policy[i], a.iterates[a.k_hat][i])
