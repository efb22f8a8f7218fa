import numpy as np
import pytest

from cmpg.game import GameSpec, JointPolicy


def random_game(seed, m=2, S=3, A=2, gamma=0.9, threshold=np.inf, horizon=None):
    """General-sum random game with uniform stop probability ``1 - gamma``."""
    rng = np.random.default_rng(seed)
    counts = (A,) * m if np.isscalar(A) else tuple(A)
    J = int(np.prod(counts))
    kernel = rng.dirichlet(np.ones(S), size=(S, J))
    if horizon is None:
        transitions, stop = gamma * kernel, np.full((S, J), 1 - gamma)
    else:
        transitions, stop = kernel, np.zeros((S, J))
    return GameSpec(
        action_counts=counts,
        rewards=rng.uniform(size=(m, S, J)),
        cost=rng.uniform(size=(S, J)),
        threshold=threshold,
        initial_dist=rng.dirichlet(np.ones(S)),
        transitions=transitions,
        stop_probs=stop,
        horizon=horizon,
        name=f"random_{seed}",
    )


def random_policy_for(spec, seed, xi=0.0):
    rng = np.random.default_rng(seed)
    tables = []
    for a in spec.action_counts:
        t = rng.dirichlet(np.ones(a), size=spec.num_states)
        tables.append(xi / a + (1 - xi) * t)
    return JointPolicy(tuple(tables), xi)


@pytest.fixture
def game():
    return random_game(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
