"""Episode simulation and REINFORCE-style value/gradient estimators.

Randomness is organised in named substreams derived from one integer seed,
so a result is a function of ``(seed, identifier)`` only.  Within a joint
episode every agent draws its own actions from its own substream while the
environment (initial state, transitions, stopping) uses one shared substream.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .game import GameSpec, JointPolicy

PRODUCT_OF_MEANS = "product_of_means"
PER_TRAJECTORY = "per_trajectory"
ESTIMATORS = (PRODUCT_OF_MEANS, PER_TRAJECTORY)


class ScoreUndefinedError(ValueError):
    """A sampled action has zero probability, so its score is undefined."""


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    return int(part)


@dataclass(frozen=True)
class RngStream:
    """A seed plus a path of substream identifiers (ints or strings)."""

    seed: int
    path: tuple = ()

    def child(self, *parts) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(parts))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=tuple(_key(p) for p in self.path))
        return np.random.default_rng(ss)


@dataclass
class Trajectory:
    """One episode.  Rewards are in the game's internal (minimisation) orientation."""

    states: np.ndarray  # (L,)
    actions: np.ndarray  # (L, m)
    rewards: np.ndarray  # (L, m)
    costs: np.ndarray  # (L,)

    def __len__(self) -> int:
        return len(self.states)


@dataclass
class Batch:
    """``B`` joint episodes padded to the longest one; ``alive`` marks real steps."""

    states: np.ndarray  # (B, L)
    joint: np.ndarray  # (B, L)
    actions: np.ndarray  # (m, B, L)
    alive: np.ndarray  # (B, L) bool
    returns: np.ndarray  # (m, B)
    cost_returns: np.ndarray  # (B,)

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @property
    def lengths(self) -> np.ndarray:
        return self.alive.sum(axis=1)

    def trajectory(self, spec: GameSpec, b: int) -> Trajectory:
        n = int(self.alive[b].sum())
        s, j = self.states[b, :n], self.joint[b, :n]
        return Trajectory(s.copy(), self.actions[:, b, :n].T.copy(), spec.rewards[:, s, j].T.copy(), spec.cost[s, j])


def _categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    return np.minimum((u[:, None] >= cdf).sum(axis=1), probs.shape[1] - 1)


def simulate_batch(spec: GameSpec, policy: JointPolicy, size: int, stream: RngStream, max_steps: int = 100_000) -> Batch:
    """Simulate ``size`` joint episodes with agents and environment on separate substreams."""
    env_rng = stream.child("env").generator()
    agent_rngs = [stream.child("agent", i).generator() for i in range(spec.num_agents)]
    m = spec.num_agents
    strides = np.array([int(np.prod(spec.action_counts[i + 1:])) for i in range(m)], dtype=np.intp)
    # outcome table: continuation to each state, then "stop" as the last column
    outcome = np.concatenate([spec.transitions, spec.stop_probs[:, :, None]], axis=2)

    s = _categorical(env_rng, np.broadcast_to(spec.initial_dist, (size, spec.num_states)))
    alive = np.ones(size, dtype=bool)
    states, joints, acts, alive_log = [], [], [], []
    t = 0
    while alive.any():
        if t >= max_steps:
            raise RuntimeError(f"episodes exceeded {max_steps} steps")
        a = np.stack([_categorical(agent_rngs[i], policy.tables[i][s]) for i in range(m)])
        j = strides @ a
        states.append(s)
        joints.append(j)
        acts.append(a)
        alive_log.append(alive.copy())
        nxt = _categorical(env_rng, outcome[s, j])
        t += 1
        if spec.horizon is None:
            alive &= nxt < spec.num_states
        elif t >= spec.horizon:
            alive[:] = False
        s = np.where(nxt < spec.num_states, nxt, 0)

    states = np.stack(states, axis=1)
    joint = np.stack(joints, axis=1)
    actions = np.stack(acts, axis=2)
    live = np.stack(alive_log, axis=1)
    returns = (spec.rewards[:, states, joint] * live[None]).sum(axis=2)
    cost_returns = (spec.cost[states, joint] * live).sum(axis=1)
    return Batch(states, joint, actions, live, returns, cost_returns)


def sample_episode(spec: GameSpec, policy: JointPolicy, stream: RngStream) -> Trajectory:
    return simulate_batch(spec, policy, 1, stream).trajectory(spec, 0)


def score_sums(spec: GameSpec, policy: JointPolicy, batch: Batch, agent: int) -> np.ndarray:
    """Per-episode ``sum_t grad log pi_i(a_t|s_t)``, shape ``(B, S, A_i)``.

    Under direct parametrisation the score of a visit is ``1/pi_i(a|s)`` on the
    visited entry and zero elsewhere.
    """
    S, A = spec.num_states, spec.action_counts[agent]
    B = batch.size
    cell = batch.states * A + batch.actions[agent]
    rows = np.broadcast_to(np.arange(B)[:, None], cell.shape)
    counts = np.zeros((B, S * A))
    np.add.at(counts, (rows[batch.alive], cell[batch.alive]), 1.0)
    counts = counts.reshape(B, S, A)
    probs = policy.tables[agent]
    visited = counts.sum(axis=0) > 0
    if np.any(visited & (probs <= 0)):
        s, a = np.argwhere(visited & (probs <= 0))[0]
        raise ScoreUndefinedError(f"agent {agent} sampled action {a} at state {s} with probability 0")
    return counts / np.where(probs > 0, probs, 1.0)[None]


@dataclass
class AgentEstimate:
    """Estimates seen by one agent from one batch of episodes."""

    value_reward: float
    value_cost: float
    grad_reward: np.ndarray
    grad_cost: np.ndarray
    se_value_reward: float
    se_value_cost: float
    se_grad_reward: np.ndarray
    se_grad_cost: np.ndarray


def _se(x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    if n < 2:
        return np.full(x.shape[1:], np.nan) if x.ndim > 1 else np.nan
    return x.std(axis=0, ddof=1) / np.sqrt(n)


def agent_estimate(spec: GameSpec, policy: JointPolicy, batch: Batch, agent: int, estimator: str = PRODUCT_OF_MEANS) -> AgentEstimate:
    if estimator not in ESTIMATORS:
        raise ValueError(f"estimator must be one of {ESTIMATORS}")
    R = batch.returns[agent]
    C = batch.cost_returns
    psi = score_sums(spec, policy, batch, agent)
    if estimator == PRODUCT_OF_MEANS:
        psi_mean = psi.mean(axis=0)
        g_r = R.mean() * psi_mean
        g_c = C.mean() * psi_mean
        # delta-method standard error of the product of two means
        se_r = np.sqrt((R.mean() * _se(psi)) ** 2 + (psi_mean * _se(R)) ** 2)
        se_c = np.sqrt((C.mean() * _se(psi)) ** 2 + (psi_mean * _se(C)) ** 2)
    else:
        prod_r = R[:, None, None] * psi
        prod_c = C[:, None, None] * psi
        g_r, g_c = prod_r.mean(axis=0), prod_c.mean(axis=0)
        se_r, se_c = _se(prod_r), _se(prod_c)
    return AgentEstimate(float(R.mean()), float(C.mean()), g_r, g_c, float(_se(R)), float(_se(C)), se_r, se_c)


def estimate_batch(
    spec: GameSpec,
    policy: JointPolicy,
    agent: int,
    batch_size: int,
    stream: RngStream,
    estimator: str = PRODUCT_OF_MEANS,
) -> AgentEstimate:
    """Value and playerwise gradient estimates for ``agent`` from ``batch_size`` episodes.

    ``product_of_means`` multiplies the batch-mean return by the batch-mean
    score sum; ``per_trajectory`` averages the per-episode products.
    """
    batch = simulate_batch(spec, policy, batch_size, stream)
    return agent_estimate(spec, policy, batch, agent, estimator)


def estimate_all(
    spec: GameSpec, policy: JointPolicy, batch_size: int, stream: RngStream, estimator: str = PRODUCT_OF_MEANS
) -> list[AgentEstimate]:
    """Estimates for every agent from one shared batch of joint episodes."""
    batch = simulate_batch(spec, policy, batch_size, stream)
    return [agent_estimate(spec, policy, batch, i, estimator) for i in range(spec.num_agents)]


# --------------------------------------------------------------------------
# trajectory dump
#
# One episode per line.  Steps are separated by ";" and each step is
# "state|a_1,...,a_m|r_1,...,r_m|cost" with rewards in internal orientation.


def format_trajectory(traj: Trajectory) -> str:
    steps = []
    for s, a, r, c in zip(traj.states, traj.actions, traj.rewards, traj.costs):
        steps.append(
            f"{int(s)}|{','.join(str(int(x)) for x in a)}|{','.join(repr(float(x)) for x in r)}|{float(c)!r}"
        )
    return ";".join(steps)


def parse_trajectory(line: str) -> Trajectory:
    states, actions, rewards, costs = [], [], [], []
    for step in line.strip().split(";"):
        s, a, r, c = step.split("|")
        states.append(int(s))
        actions.append([int(x) for x in a.split(",")])
        rewards.append([float(x) for x in r.split(",")])
        costs.append(float(c))
    return Trajectory(np.array(states), np.array(actions), np.array(rewards), np.array(costs))


def dump_trajectories(trajs: Iterable[Trajectory], path) -> None:
    with open(path, "w") as fh:
        for traj in trajs:
            fh.write(format_trajectory(traj) + "\n")


def load_trajectories(path) -> list[Trajectory]:
    with open(path) as fh:
        return [parse_trajectory(line) for line in fh if line.strip()]
