import numpy as np
import pytest

from cmpg.environments import (
    CLEAN,
    DIRTY,
    ENVIRONMENTS,
    POLLUTED,
    POLLUTION_FREE,
    PotentialSpec,
    build_environment,
)
from cmpg.equilibrium import verify_mpg
from cmpg.game import JointPolicy, exact_value, validate_spec


def joint_index(spec, actions):
    return int(np.ravel_multi_index(actions, spec.action_counts))


def test_pollution_reward_when_polluted_and_dirty():
    spec, _ = build_environment("pollution_tax")
    j = joint_index(spec, (DIRTY, DIRTY))
    # native reward 4 - 4 = 0 for each agent
    assert spec.sign * spec.rewards[0, POLLUTED, j] == pytest.approx(0.0)
    assert spec.sign * spec.rewards[1, POLLUTION_FREE, j] == pytest.approx(4.0)


def test_pollution_all_clean_stays_free_and_costs_m():
    spec, _ = build_environment("pollution_tax")
    j = joint_index(spec, (CLEAN, CLEAN))
    assert spec.cost[POLLUTION_FREE, j] == 2.0
    np.testing.assert_array_equal(spec.transitions[:, j, POLLUTION_FREE], [1.0, 1.0])
    for j in range(spec.num_joint):
        for s in range(2):
            row = spec.transitions[s, j]
            assert sorted(row.tolist()) == [0.0, 1.0]


def test_pollution_next_state_tax():
    spec, _ = build_environment("pollution_tax", tax_timing="next")
    j = joint_index(spec, (CLEAN, DIRTY))
    # dirty play taxes the transition even from the pollution-free state
    assert spec.sign * spec.rewards[0, POLLUTION_FREE, j] == pytest.approx(2.0 - 4.0)
    with pytest.raises(ValueError):
        build_environment("pollution_tax", tax_timing="later")


def test_always_dirty_cost_is_zero_and_clean_cost_is_twenty():
    spec, _ = build_environment("pollution_tax")
    dirty = JointPolicy.deterministic(spec, [[DIRTY, DIRTY], [DIRTY, DIRTY]])
    clean = JointPolicy.deterministic(spec, [[CLEAN, CLEAN], [CLEAN, CLEAN]])
    assert exact_value(spec, dirty, "cost").value == 0.0
    assert exact_value(spec, clean, "cost").value == pytest.approx(20.0)


def test_marketplace_quadratic_reward_and_potential():
    spec, pot = build_environment("energy_marketplace", reward_variant="quadratic")
    j = joint_index(spec, (1, 1))
    assert spec.sign * spec.rewards[0, 0, j] == pytest.approx(0.5)
    assert -pot.table[0, j] == pytest.approx(1.25)


def test_marketplace_zero_action():
    spec, _ = build_environment("energy_marketplace")
    j = joint_index(spec, (0, 0))
    assert np.all(spec.cost[:, j] == 0.0)
    np.testing.assert_allclose(spec.transitions[:, j, 0], 0.9 + 0.1 / 6)
    np.testing.assert_allclose(spec.transitions.sum(axis=2), 1.0)


def test_marketplace_linear_variant_is_default():
    spec, _ = build_environment("energy_marketplace")
    j = joint_index(spec, (2, 1))
    # 2*2 - 0.25*2*3 - 2*1.25^1 at s=1
    assert spec.sign * spec.rewards[0, 1, j] == pytest.approx(4.0 - 1.5 - 2.5)


@pytest.mark.parametrize("env_id", sorted(ENVIRONMENTS))
def test_builtin_specs_validate(env_id):
    spec, pot = build_environment(env_id)
    assert validate_spec(spec) == []
    assert pot.table.shape == (spec.num_states, spec.num_joint)


@pytest.mark.parametrize("env_id", ["pollution_tax", "energy_marketplace"])
def test_random_stopping_twin(env_id):
    spec, _ = build_environment(env_id, horizon=None)
    assert spec.horizon is None
    np.testing.assert_allclose(spec.stop_probs, 0.1)
    assert validate_spec(spec) == []


def test_unknown_environment():
    with pytest.raises(ValueError, match="unknown environment"):
        build_environment("gridworld")


def test_identical_interest_determinism():
    a, _ = build_environment("random_identical", seed=4, m=3)
    b, _ = build_environment("random_identical", seed=4, m=3)
    assert a.rewards.tobytes() == b.rewards.tobytes()
    assert a.transitions.tobytes() == b.transitions.tobytes()
    c, _ = build_environment("random_identical", seed=5, m=3)
    assert a.rewards.tobytes() != c.rewards.tobytes()
    # every agent shares one table
    assert a.rewards[0].tobytes() == a.rewards[1].tobytes() == a.rewards[2].tobytes()


def test_identical_interest_potential_verifies():
    spec, pot = build_environment("random_identical", seed=2, S=3, A=2)
    assert verify_mpg(spec, pot, trials=30).status == "verified"


@pytest.mark.parametrize("variant", ["quadratic", "linear"])
def test_marketplace_candidate_potential_falsified(variant):
    # the candidate charges m * c2^s rather than each agent's own a_i * c2^s,
    # and the demand transition depends on the joint action
    spec, pot = build_environment("energy_marketplace", horizon=None, S=3, A=3, reward_variant=variant)
    res = verify_mpg(spec, pot, trials=20)
    assert res.status == "falsified" and res.max_deviation > 1e-3


@pytest.mark.parametrize("timing", ["current", "next"])
def test_pollution_candidate_potential_falsified(timing):
    # state-dependent policies of the other player break the candidate
    spec, pot = build_environment("pollution_tax", horizon=None, tax_timing=timing)
    res = verify_mpg(spec, pot, trials=20)
    assert res.status == "falsified" and res.max_deviation > 1e-3


def _corrected_marketplace_potential(spec, c0=2.0, c1=0.25, c2=1.25):
    acts = spec.agent_actions().T.astype(float)
    total = acts.sum(axis=1)
    pair = (total ** 2 - (acts ** 2).sum(axis=1)) / 2.0
    price = c2 ** np.arange(spec.num_states)
    return -((c0 * total - c1 * (acts ** 2).sum(axis=1) - c1 * pair)[None, :] - total[None, :] * price[:, None])


def test_linear_variant_has_exact_stage_potential():
    # single demand level: a repeated game whose per-agent-price potential is exact
    spec, _ = build_environment("energy_marketplace", horizon=None, S=1, A=3)
    res = verify_mpg(spec, PotentialSpec(_corrected_marketplace_potential(spec)), trials=50)
    assert res.status == "verified"
    quad, _ = build_environment("energy_marketplace", horizon=None, S=1, A=3, reward_variant="quadratic")
    assert verify_mpg(quad, PotentialSpec(_corrected_marketplace_potential(quad)), trials=50).status == "falsified"
