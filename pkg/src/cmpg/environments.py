"""Benchmark constrained Markov potential games.

Each builder returns ``(GameSpec, PotentialSpec)``.  ``horizon`` selects the
episode model: ``None`` for random stopping with uniform stop probability
``1 - gamma`` (used for exact diagnostics), or an integer number of decision
steps (used for the training runs).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .game import GameSpec, check_spec

CLEAN, DIRTY = 0, 1
POLLUTION_FREE, POLLUTED = 0, 1


@dataclass
class PotentialSpec:
    """Per-state potential table ``phi[s, a]`` in the game's internal orientation."""

    table: np.ndarray
    status: str = "unchecked"
    max_deviation: float | None = None
    label: str = "potential"


def _kernel_to_spec(
    kernel: np.ndarray, gamma: float, horizon: int | None
) -> tuple[np.ndarray, np.ndarray]:
    """Split a stochastic kernel into (continuation, stop) arrays for the horizon model."""
    if horizon is None:
        kappa = 1.0 - gamma
        return (1.0 - kappa) * kernel, np.full(kernel.shape[:2], kappa)
    return kernel.copy(), np.zeros(kernel.shape[:2])


@dataclass(frozen=True)
class PollutionTaxParams:
    m: int = 2
    clean_profit: float = 2.0
    dirty_profit: float = 4.0
    tax: float = 4.0
    clean_cost: float = 1.0
    threshold: float = 12.0
    tax_timing: str = "current"
    gamma: float = 0.9
    horizon: int | None = 10


TAX_TIMINGS = ("current", "next")


def build_pollution_tax(params: PollutionTaxParams = PollutionTaxParams()):
    """Two states (pollution-free, polluted), actions clean/dirty.

    The game moves to the polluted state iff some agent plays dirty.  Each
    agent earns its own profit minus the tax of the current state
    (``tax_timing="current"``) or of the state the joint action leads to
    (``"next"``); the common cost counts the agents that play clean.
    Players maximise.
    """
    m = params.m
    if m < 1:
        raise ValueError("pollution tax needs at least one agent")
    if params.tax_timing not in TAX_TIMINGS:
        raise ValueError(f"tax_timing must be one of {TAX_TIMINGS}")
    counts = (2,) * m
    J = 2 ** m
    acts = np.array(list(itertools.product(range(2), repeat=m)))  # (J, m), agent 1 outermost
    profit = np.where(acts == CLEAN, params.clean_profit, params.dirty_profit)  # (J, m)
    tax = np.array([0.0, params.tax])

    any_dirty = (acts == DIRTY).any(axis=1)
    if params.tax_timing == "current":
        charged = np.broadcast_to(tax[:, None], (2, J))
    else:
        charged = np.broadcast_to(np.where(any_dirty, params.tax, 0.0)[None, :], (2, J))
    rewards = profit.T[:, None, :] - charged[None]  # (m, S, J)
    n_clean = (acts == CLEAN).sum(axis=1)
    cost = np.tile(params.clean_cost * n_clean, (2, 1))
    kernel = np.zeros((2, J, 2))
    kernel[:, np.arange(J), np.where(any_dirty, POLLUTED, POLLUTION_FREE)] = 1.0
    transitions, stop = _kernel_to_spec(kernel, params.gamma, params.horizon)

    phi = profit.sum(axis=1)[None, :] - charged
    spec = GameSpec(
        action_counts=counts,
        rewards=-rewards,
        cost=cost,
        threshold=params.threshold,
        initial_dist=np.array([1.0, 0.0]),
        transitions=transitions,
        stop_probs=stop,
        horizon=params.horizon,
        sign=-1,
        name="pollution_tax",
    )
    return check_spec(spec), PotentialSpec(-phi)


@dataclass(frozen=True)
class EnergyMarketParams:
    m: int = 2
    S: int = 5
    A: int = 5
    W: int = 5
    c0: float = 2.0
    c1: float = 0.25
    c2: float = 1.25
    threshold: float = 16.0
    stay_prob: float = 0.9
    reward_variant: str = "linear"
    gamma: float = 0.9
    horizon: int | None = 10


REWARD_VARIANTS = ("linear", "quadratic")


def build_energy_marketplace(params: EnergyMarketParams = EnergyMarketParams()):
    """Energy contribution game on demand levels ``0..S-1``.

    Agent i contributes ``a_i`` units.  With ``w`` uniform on ``{0..W}`` the next
    state is ``clip(sum(a) - w, 0, S-1)`` with probability ``stay_prob`` and
    ``min(w, S-1)`` otherwise.  Reward variants:

    * ``linear`` (default): ``c0 a_i - c1 a_i sum(a) - a_i c2^s``
    * ``quadratic``: ``c0 a_i^2 - c1 a_i^2 sum(a) - a_i c2^s``

    The linear form is the default because the candidate potential is an
    exact stage potential for it once the price term is charged per agent;
    the quadratic form admits no such correction.

    The cost is the total contribution; players maximise.
    """
    p = params
    if p.m < 1 or p.S < 1 or p.A < 1 or p.W < 0:
        raise ValueError(f"invalid marketplace parameters: {p}")
    if p.reward_variant not in REWARD_VARIANTS:
        raise ValueError(f"reward_variant must be one of {REWARD_VARIANTS}")
    counts = (p.A,) * p.m
    acts = np.array(list(itertools.product(range(p.A), repeat=p.m)), dtype=float)  # (J, m)
    J = acts.shape[0]
    total = acts.sum(axis=1)
    price = p.c2 ** np.arange(p.S)  # (S,)

    own = acts ** 2 if p.reward_variant == "quadratic" else acts
    stage = p.c0 * own - p.c1 * own * total[:, None]  # (J, m)
    rewards = stage.T[:, None, :] - acts.T[:, None, :] * price[None, :, None]  # (m, S, J)
    cost = np.tile(total, (p.S, 1))

    pair = (total ** 2 - (acts ** 2).sum(axis=1)) / 2.0
    phi = (p.c0 * total - p.c1 * (acts ** 2).sum(axis=1) - p.c1 * pair)[None, :] - p.m * price[:, None]

    kernel = np.zeros((p.S, J, p.S))
    w_prob = 1.0 / (p.W + 1)
    for w in range(p.W + 1):
        nxt = np.clip(total - w, 0, p.S - 1).astype(int)
        kernel[:, np.arange(J), nxt] += p.stay_prob * w_prob
        kernel[:, :, min(w, p.S - 1)] += (1.0 - p.stay_prob) * w_prob
    transitions, stop = _kernel_to_spec(kernel, p.gamma, p.horizon)

    spec = GameSpec(
        action_counts=counts,
        rewards=-rewards,
        cost=cost,
        threshold=p.threshold,
        initial_dist=np.full(p.S, 1.0 / p.S),
        transitions=transitions,
        stop_probs=stop,
        horizon=p.horizon,
        sign=-1,
        name="energy_marketplace",
    )
    return check_spec(spec), PotentialSpec(-phi)


@dataclass(frozen=True)
class RandomIdenticalParams:
    m: int = 2
    S: int = 2
    A: int = 2
    seed: int = 0
    cost_scale: float = 1.0
    threshold: float = float("inf")
    gamma: float = 0.9


def build_random_identical_interest(params: RandomIdenticalParams = RandomIdenticalParams()):
    """Fully cooperative random game: every agent shares one reward table.

    Rewards are uniform on [0, 1], costs uniform on [0, cost_scale], each
    transition row is a uniform-Dirichlet draw scaled by ``gamma`` and the
    initial distribution is uniform.  The shared reward is an exact potential.
    """
    p = params
    rng = np.random.default_rng(np.random.SeedSequence(p.seed, spawn_key=(0x1D,)))
    counts = (p.A,) * p.m
    J = p.A ** p.m
    shared = rng.uniform(0.0, 1.0, size=(p.S, J))
    cost = rng.uniform(0.0, p.cost_scale, size=(p.S, J))
    kernel = rng.dirichlet(np.ones(p.S), size=(p.S, J))
    transitions, stop = _kernel_to_spec(kernel, p.gamma, None)
    spec = GameSpec(
        action_counts=counts,
        rewards=np.broadcast_to(shared, (p.m, p.S, J)).copy(),
        cost=cost,
        threshold=p.threshold,
        initial_dist=np.full(p.S, 1.0 / p.S),
        transitions=transitions,
        stop_probs=stop,
        horizon=None,
        sign=1,
        name="random_identical",
    )
    return check_spec(spec), PotentialSpec(shared.copy(), status="verified", max_deviation=0.0)


ENVIRONMENTS = {
    "pollution_tax": (PollutionTaxParams, build_pollution_tax),
    "energy_marketplace": (EnergyMarketParams, build_energy_marketplace),
    "random_identical": (RandomIdenticalParams, build_random_identical_interest),
}


def build_environment(env_id: str, **overrides):
    """Build an environment by id with keyword parameter overrides."""
    try:
        params_cls, builder = ENVIRONMENTS[env_id]
    except KeyError:
        raise ValueError(f"unknown environment {env_id!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return builder(params_cls(**overrides))
