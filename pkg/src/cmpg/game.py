"""Tabular constrained Markov games and their exact linear-algebra quantities.

Joint actions are stored flat.  The flat index of a tuple ``(a_1, ..., a_m)``
is row-major over agents with agent 1 outermost, i.e. the C-order
``np.ravel_multi_index(actions, action_counts)``.

All payoffs held by a :class:`GameSpec` follow a *minimisation* convention.
Games whose players maximise rewards are stored with negated rewards and
``sign = -1``; ``spec.sign * value`` recovers the native orientation.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

SINGULAR_TOL = 1e-12
MASS_TOL = 1e-12


class SingularSystemError(ValueError):
    """Raised when ``I - P_pi`` cannot be inverted (the stopping law is invalid)."""


class UnsupportedModeError(ValueError):
    """Raised when an operation needs random stopping but the game has a fixed horizon."""


class InvalidSpecError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GameSpec:
    """A tabular constrained Markov game with a common cost.

    Array shapes (``J = prod(action_counts)``):

    * ``rewards``: ``(m, S, J)``, minimisation-oriented
    * ``cost``: ``(S, J)``
    * ``transitions``: ``(S, J, S)`` continuation kernel
    * ``stop_probs``: ``(S, J)``
    * ``initial_dist``: ``(S,)``

    ``horizon`` is ``None`` for random stopping, otherwise the fixed number of
    decision steps per episode (in which case ``stop_probs`` must be zero).
    """

    action_counts: tuple[int, ...]
    rewards: np.ndarray
    cost: np.ndarray
    threshold: float
    initial_dist: np.ndarray
    transitions: np.ndarray
    stop_probs: np.ndarray
    horizon: int | None = None
    sign: int = 1
    name: str = "game"

    def __post_init__(self):
        object.__setattr__(self, "action_counts", tuple(int(a) for a in self.action_counts))
        for attr in ("rewards", "cost", "initial_dist", "transitions", "stop_probs"):
            arr = np.array(getattr(self, attr), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)
        if self.sign not in (1, -1):
            raise InvalidSpecError("sign must be +1 (minimize) or -1 (maximize)")

    @property
    def num_states(self) -> int:
        return self.initial_dist.shape[0]

    @property
    def num_agents(self) -> int:
        return len(self.action_counts)

    @property
    def num_joint(self) -> int:
        return int(np.prod(self.action_counts))

    @property
    def max_actions(self) -> int:
        return max(self.action_counts)

    @property
    def random_stopping(self) -> bool:
        return self.horizon is None

    @property
    def direction(self) -> str:
        return "minimize" if self.sign == 1 else "maximize"

    @property
    def native_rewards(self) -> np.ndarray:
        return self.sign * self.rewards

    @property
    def gamma(self) -> float:
        """``1 - min kappa`` (random stopping only)."""
        return 1.0 - float(self.stop_probs.min())

    def agent_actions(self) -> np.ndarray:
        """``(m, J)`` array: the action of every agent in every flat joint action."""
        return _agent_actions(self.action_counts)

    def joint_index(self, actions: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(actions), self.action_counts))

    def joint_tuple(self, index: int) -> tuple[int, ...]:
        return tuple(int(a) for a in np.unravel_index(index, self.action_counts))

    def with_threshold(self, threshold: float) -> "GameSpec":
        return _replace(self, threshold=float(threshold))

    def with_payoffs(self, rewards=None, cost=None) -> "GameSpec":
        return _replace(
            self,
            rewards=self.rewards if rewards is None else rewards,
            cost=self.cost if cost is None else cost,
        )


def _replace(spec: GameSpec, **changes) -> GameSpec:
    fields = dict(
        action_counts=spec.action_counts,
        rewards=spec.rewards,
        cost=spec.cost,
        threshold=spec.threshold,
        initial_dist=spec.initial_dist,
        transitions=spec.transitions,
        stop_probs=spec.stop_probs,
        horizon=spec.horizon,
        sign=spec.sign,
        name=spec.name,
    )
    fields.update(changes)
    return GameSpec(**fields)


_AGENT_ACTION_CACHE: dict[tuple[int, ...], np.ndarray] = {}


def _agent_actions(action_counts: tuple[int, ...]) -> np.ndarray:
    cached = _AGENT_ACTION_CACHE.get(action_counts)
    if cached is None:
        n = int(np.prod(action_counts))
        cached = np.stack(np.unravel_index(np.arange(n), action_counts)).astype(np.intp)
        cached.setflags(write=False)
        _AGENT_ACTION_CACHE[action_counts] = cached
    return cached


@dataclass(frozen=True, eq=False)
class JointPolicy:
    """Per-agent tables ``pi_i[s, a_i]``; ``xi`` is the optional exploration floor."""

    tables: tuple[np.ndarray, ...]
    xi: float = 0.0

    def __post_init__(self):
        tables = []
        for t in self.tables:
            arr = np.array(t, dtype=float)
            arr.setflags(write=False)
            tables.append(arr)
        object.__setattr__(self, "tables", tuple(tables))

    def __getitem__(self, i: int) -> np.ndarray:
        return self.tables[i]

    def __len__(self) -> int:
        return len(self.tables)

    @classmethod
    def uniform(cls, spec: GameSpec, xi: float = 0.0) -> "JointPolicy":
        return cls(tuple(np.full((spec.num_states, a), 1.0 / a) for a in spec.action_counts), xi)

    @classmethod
    def deterministic(cls, spec: GameSpec, choice: Sequence[Sequence[int]], xi: float = 0.0) -> "JointPolicy":
        """``choice[i][s]`` is agent i's action at state s; mixed with the floor when ``xi > 0``."""
        tables = []
        for i, a_count in enumerate(spec.action_counts):
            t = np.full((spec.num_states, a_count), xi / a_count)
            t[np.arange(spec.num_states), np.asarray(choice[i])] += 1.0 - xi
            tables.append(t)
        return cls(tuple(tables), xi)

    def replace(self, i: int, table: np.ndarray) -> "JointPolicy":
        tables = list(self.tables)
        tables[i] = table
        return JointPolicy(tuple(tables), self.xi)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tables])

    def distance(self, other: "JointPolicy") -> float:
        return float(np.linalg.norm(self.flat() - other.flat()))

    def joint_probs(self, spec: GameSpec) -> np.ndarray:
        """``(S, J)`` probabilities of every joint action under the product policy."""
        acts = spec.agent_actions()
        out = np.ones((spec.num_states, spec.num_joint))
        for i, t in enumerate(self.tables):
            out *= t[:, acts[i]]
        return out

    def others_probs(self, spec: GameSpec, i: int) -> np.ndarray:
        """``(S, J)`` product of every agent's probability except agent ``i``."""
        acts = spec.agent_actions()
        out = np.ones((spec.num_states, spec.num_joint))
        for j, t in enumerate(self.tables):
            if j != i:
                out *= t[:, acts[j]]
        return out

    def violations(self, spec: GameSpec | None = None, tol: float = MASS_TOL) -> list[str]:
        problems = []
        if spec is not None:
            if len(self.tables) != spec.num_agents:
                return [f"policy has {len(self.tables)} agents, game has {spec.num_agents}"]
        for i, t in enumerate(self.tables):
            if spec is not None and t.shape != (spec.num_states, spec.action_counts[i]):
                problems.append(f"agent {i}: table shape {t.shape} does not match game")
                continue
            if not np.all(np.isfinite(t)):
                problems.append(f"agent {i}: non-finite entries")
                continue
            row_err = np.abs(t.sum(axis=1) - 1.0)
            for s in np.flatnonzero(row_err > tol):
                problems.append(f"agent {i}, state {s}: row sums to {t[s].sum():.15g}")
            floor = self.xi / t.shape[1]
            for s, a in zip(*np.nonzero(t < floor - tol)):
                problems.append(f"agent {i}, state {s}, action {a}: {t[s, a]:.3g} below floor {floor:.3g}")
        return problems


@dataclass(frozen=True)
class ValueReport:
    per_state: np.ndarray
    value: float
    payoff: str

    def __float__(self) -> float:
        return self.value


@dataclass(frozen=True)
class TheoreticalConstants:
    """Smoothness/Lipschitz constants of the potential and constraint values.

    These formulas assume payoffs in [0, 1]; games with larger payoffs scale
    them accordingly and the values here are then only indicative.
    """

    smoothness: float
    lipschitz: float
    eta: float
    diameter: float
    gamma: float
    mismatch_lower_bound: float | None = None
    potential_bound: float | None = None


# --------------------------------------------------------------------------
# validation


def validate_spec(spec: GameSpec) -> list[str]:
    """Return every violated invariant of ``spec`` as a readable message."""
    problems: list[str] = []
    S, m, J = spec.num_states, spec.num_agents, spec.num_joint
    if S < 1:
        problems.append("num_states must be positive")
    if m < 1:
        problems.append("num_agents must be positive")
    if any(a < 1 for a in spec.action_counts):
        problems.append("action counts must be positive")
    expected = {
        "rewards": (m, S, J),
        "cost": (S, J),
        "transitions": (S, J, S),
        "stop_probs": (S, J),
        "initial_dist": (S,),
    }
    for attr, shape in expected.items():
        got = getattr(spec, attr).shape
        if got != shape:
            problems.append(f"{attr} has shape {got}, expected {shape}")
    if problems:
        return problems

    for attr in ("rewards", "cost", "transitions", "stop_probs", "initial_dist"):
        if not np.all(np.isfinite(getattr(spec, attr))):
            problems.append(f"{attr} contains non-finite values")
    if not np.isfinite(spec.threshold) and spec.threshold != np.inf:
        problems.append("threshold must be finite or +inf")
    if np.any(spec.transitions < 0):
        problems.append("transitions contain negative probabilities")
    if np.any(spec.stop_probs < 0) or np.any(spec.stop_probs > 1):
        problems.append("stop_probs must lie in [0, 1]")

    mass = spec.transitions.sum(axis=2) + spec.stop_probs
    for s, j in zip(*np.nonzero(np.abs(mass - 1.0) > MASS_TOL)):
        problems.append(
            f"(s={s}, a={spec.joint_tuple(j)}): continuation + stopping mass is {mass[s, j]:.15g}"
        )

    mu = spec.initial_dist
    if np.any(mu < 0) or abs(mu.sum() - 1.0) > MASS_TOL:
        problems.append(f"initial_dist is not a probability vector (sum {mu.sum():.15g})")

    if spec.horizon is None:
        if spec.stop_probs.min() <= 0:
            problems.append("random stopping requires every stop probability to be positive")
    else:
        if int(spec.horizon) < 1:
            problems.append("fixed horizon must be at least 1")
        if np.any(spec.stop_probs != 0):
            problems.append("fixed-horizon games must have zero stop probabilities")
    return problems


def check_spec(spec: GameSpec) -> GameSpec:
    problems = validate_spec(spec)
    if problems:
        raise InvalidSpecError("; ".join(problems))
    return spec


# --------------------------------------------------------------------------
# exact values, visitation and gradients


def _payoff_table(spec: GameSpec, payoff) -> tuple[np.ndarray, str]:
    """Resolve a payoff selector: ``"cost"``, an agent index, or an ``(S, J)`` table."""
    if isinstance(payoff, str):
        if payoff != "cost":
            raise ValueError(f"unknown payoff selector {payoff!r}")
        return spec.cost, "cost"
    if isinstance(payoff, (int, np.integer)):
        return spec.rewards[int(payoff)], f"reward[{int(payoff)}]"
    table = np.asarray(payoff, dtype=float)
    if table.shape != (spec.num_states, spec.num_joint):
        raise ValueError(f"payoff table has shape {table.shape}, expected {(spec.num_states, spec.num_joint)}")
    return table, "custom"


def policy_kernel(spec: GameSpec, policy: JointPolicy) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(joint_probs, P_pi)`` with ``P_pi[s, s'] = sum_a pi(a|s) P[s, a, s']``."""
    probs = policy.joint_probs(spec)
    p_pi = np.einsum("sj,sjt->st", probs, spec.transitions)
    return probs, p_pi


def _solve(matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    lu_ok = np.linalg.cond(matrix) < 1.0 / SINGULAR_TOL
    if not lu_ok:
        raise SingularSystemError("I - P_pi is numerically singular; check the stop probabilities")
    return np.linalg.solve(matrix, rhs)


def exact_value(spec: GameSpec, policy: JointPolicy, payoff) -> ValueReport:
    """Expected cumulative payoff from every state and under ``initial_dist``.

    Random stopping solves ``(I - P_pi) V = r_pi``; a fixed horizon ``T`` sums
    exactly ``T`` undiscounted stage payoffs by backward recursion.
    """
    table, label = _payoff_table(spec, payoff)
    probs, p_pi = policy_kernel(spec, policy)
    r_pi = (probs * table).sum(axis=1)
    if spec.horizon is None:
        v = _solve(np.eye(spec.num_states) - p_pi, r_pi)
    else:
        v = np.zeros(spec.num_states)
        for _ in range(int(spec.horizon)):
            v = r_pi + p_pi @ v
    return ValueReport(v, float(spec.initial_dist @ v), label)


def _require_random_stopping(spec: GameSpec, what: str) -> None:
    if spec.horizon is not None:
        raise UnsupportedModeError(f"{what} is only defined for random-stopping games")


def visitation(spec: GameSpec, policy: JointPolicy) -> np.ndarray:
    """Expected number of visits to each state, ``d = (I - P_pi^T)^{-1} mu``."""
    _require_random_stopping(spec, "visitation")
    _, p_pi = policy_kernel(spec, policy)
    return _solve(np.eye(spec.num_states) - p_pi.T, spec.initial_dist)


def exact_policy_gradient(spec: GameSpec, policy: JointPolicy, payoff, agent: int) -> np.ndarray:
    """Partial derivatives of ``V_u(mu)`` w.r.t. agent ``agent``'s table entries.

    ``dV/dpi_i(a_i|s) = d(s) * sum_{a_-i} pi_-i(a_-i|s) [u(s,a) + sum_s' P(s'|s,a) V(s')]``
    """
    _require_random_stopping(spec, "exact_policy_gradient")
    table, _ = _payoff_table(spec, payoff)
    probs, p_pi = policy_kernel(spec, policy)
    eye = np.eye(spec.num_states)
    v = _solve(eye - p_pi, (probs * table).sum(axis=1))
    d = _solve(eye - p_pi.T, spec.initial_dist)
    q = table + spec.transitions @ v
    weighted = policy.others_probs(spec, agent) * q
    acts = spec.agent_actions()[agent]
    q_bar = np.zeros((spec.num_states, spec.action_counts[agent]))
    for a in range(spec.action_counts[agent]):
        q_bar[:, a] = weighted[:, acts == a].sum(axis=1)
    return d[:, None] * q_bar


def exact_gradients(spec: GameSpec, policy: JointPolicy, payoff_for_agent) -> list[np.ndarray]:
    """Gradients for every agent; ``payoff_for_agent(i)`` selects the payoff."""
    return [exact_policy_gradient(spec, policy, payoff_for_agent(i), i) for i in range(spec.num_agents)]


def exact_bundle(spec: GameSpec, policy: JointPolicy) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Values and own-payoff/cost gradients for every agent from one pair of solves.

    Returns ``(values, reward_grads, cost_grads)`` where ``values[i]`` is
    ``V_{r_i}(mu)`` for ``i < m`` and ``values[m]`` is ``V_c(mu)``.
    """
    _require_random_stopping(spec, "exact_bundle")
    probs, p_pi = policy_kernel(spec, policy)
    eye = np.eye(spec.num_states)
    tables = np.concatenate([spec.rewards, spec.cost[None]], axis=0)  # (m+1, S, J)
    r_pi = np.einsum("sj,usj->su", probs, tables)
    v = _solve(eye - p_pi, r_pi)  # (S, m+1)
    d = np.linalg.solve(eye - p_pi.T, spec.initial_dist)
    q = tables + np.einsum("sjt,tu->usj", spec.transitions, v)
    acts = spec.agent_actions()
    reward_grads, cost_grads = [], []
    for i in range(spec.num_agents):
        onehot = (acts[i][:, None] == np.arange(spec.action_counts[i])[None, :]).astype(float)
        others = policy.others_probs(spec, i)
        reward_grads.append(d[:, None] * ((others * q[i]) @ onehot))
        cost_grads.append(d[:, None] * ((others * q[-1]) @ onehot))
    return spec.initial_dist @ v, reward_grads, cost_grads


# --------------------------------------------------------------------------
# theoretical constants


def theoretical_constants(spec: GameSpec, mismatch: bool = False, enum_limit: int = 10_000) -> TheoreticalConstants:
    _require_random_stopping(spec, "theoretical_constants")
    gamma = spec.gamma
    m, a_max = spec.num_agents, spec.max_actions
    if 1.0 - gamma < 1e-6:
        raise OverflowError(f"1 - gamma = {1 - gamma:.3g} is too close to zero")
    smooth = 2.0 * m * gamma * a_max / (1.0 - gamma) ** 3
    if smooth <= 0:
        raise ValueError("smoothness constant is zero (gamma = 0); the proximal step 1/(2L) is undefined")
    lipschitz = np.sqrt(m * a_max) / (1.0 - gamma) ** 2
    diameter = np.sqrt(2.0 * m * spec.num_states)

    bound = np.abs(spec.rewards).sum(axis=0).max() / (1.0 - gamma)
    mismatch_lb = mismatch_lower_bound(spec, enum_limit) if mismatch else None
    return TheoreticalConstants(
        smoothness=smooth,
        lipschitz=lipschitz,
        eta=1.0 / (2.0 * smooth),
        diameter=diameter,
        gamma=gamma,
        mismatch_lower_bound=mismatch_lb,
        potential_bound=float(bound),
    )


def deterministic_policies(spec: GameSpec, agents: Sequence[int] | None = None):
    """Yield every deterministic joint policy (or over ``agents``' choices only)."""
    S = spec.num_states
    per_agent = [itertools.product(range(a), repeat=S) for a in spec.action_counts]
    for choice in itertools.product(*[list(p) for p in per_agent]):
        yield JointPolicy.deterministic(spec, choice)


def mismatch_lower_bound(spec: GameSpec, enum_limit: int = 10_000) -> float:
    """``max ||d_mu^pi / mu||_inf`` over deterministic joint policies.

    Only a lower bound on the maximum over all stochastic policies.  States
    with ``mu(s) = 0`` that are reachable make the ratio infinite.
    """
    count = spec.num_states * int(np.prod([a ** spec.num_states for a in spec.action_counts]))
    if count > enum_limit:
        raise ValueError(f"{count} deterministic policies exceed the enumeration limit {enum_limit}")
    mu = spec.initial_dist
    best = 0.0
    for pol in deterministic_policies(spec):
        d = visitation(spec, pol)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(mu > 0, d / np.where(mu > 0, mu, 1.0), np.where(d > 0, np.inf, 0.0))
        best = max(best, float(ratio.max()))
    return best


# --------------------------------------------------------------------------
# serialisation

FORMAT_TAG = "cmpg-game/1"


def _array_record(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": arr.ravel().tolist()}


def _array_from(record: dict, key: str) -> np.ndarray:
    try:
        shape = tuple(int(n) for n in record["shape"])
        data = np.asarray(record["data"], dtype=float)
    except (KeyError, TypeError) as exc:
        raise InvalidSpecError(f"{key}: expected {{shape, data}} record") from exc
    if data.size != int(np.prod(shape)):
        raise InvalidSpecError(f"{key}: {data.size} values do not fill shape {shape}")
    return data.reshape(shape)


def spec_to_dict(spec: GameSpec) -> dict:
    """Plain-data form: scalars plus ``{shape, data}`` records for every array.

    Rewards are written in the native orientation given by ``direction``.
    """
    return {
        "format": FORMAT_TAG,
        "name": spec.name,
        "num_states": spec.num_states,
        "num_agents": spec.num_agents,
        "action_counts": list(spec.action_counts),
        "joint_index": "row-major, agent 1 outermost",
        "direction": spec.direction,
        "threshold": spec.threshold if np.isfinite(spec.threshold) else "inf",
        "horizon": "random_stopping" if spec.horizon is None else {"fixed": int(spec.horizon)},
        "rewards": _array_record(spec.native_rewards),
        "cost": _array_record(spec.cost),
        "initial_dist": _array_record(spec.initial_dist),
        "transitions": _array_record(spec.transitions),
        "stop_probs": _array_record(spec.stop_probs),
    }


def spec_from_dict(data: dict) -> GameSpec:
    if data.get("format") != FORMAT_TAG:
        raise InvalidSpecError(f"unsupported format {data.get('format')!r}")
    direction = data.get("direction", "minimize")
    if direction not in ("minimize", "maximize"):
        raise InvalidSpecError(f"direction must be minimize or maximize, got {direction!r}")
    sign = 1 if direction == "minimize" else -1
    horizon = data.get("horizon", "random_stopping")
    if horizon == "random_stopping":
        horizon_steps = None
    elif isinstance(horizon, dict) and "fixed" in horizon:
        horizon_steps = int(horizon["fixed"])
    else:
        raise InvalidSpecError(f"unrecognised horizon {horizon!r}")
    threshold = data["threshold"]
    spec = GameSpec(
        action_counts=tuple(data["action_counts"]),
        rewards=sign * _array_from(data["rewards"], "rewards"),
        cost=_array_from(data["cost"], "cost"),
        threshold=float(threshold),
        initial_dist=_array_from(data["initial_dist"], "initial_dist"),
        transitions=_array_from(data["transitions"], "transitions"),
        stop_probs=_array_from(data["stop_probs"], "stop_probs"),
        horizon=horizon_steps,
        sign=sign,
        name=data.get("name", "game"),
    )
    if spec.num_states != int(data["num_states"]) or spec.num_agents != int(data["num_agents"]):
        raise InvalidSpecError("declared num_states/num_agents disagree with the arrays")
    return check_spec(spec)


def save_spec(spec: GameSpec, path) -> None:
    Path(path).write_text(json.dumps(spec_to_dict(spec), indent=1))


def load_spec(path) -> GameSpec:
    return spec_from_dict(json.loads(Path(path).read_text()))


def policy_to_dict(policy: JointPolicy) -> dict:
    return {
        "format": "cmpg-policy/1",
        "xi": policy.xi,
        "tables": [_array_record(t) for t in policy.tables],
    }


def policy_from_dict(data: dict) -> JointPolicy:
    if data.get("format") != "cmpg-policy/1":
        raise ValueError(f"unsupported policy format {data.get('format')!r}")
    return JointPolicy(tuple(_array_from(t, f"tables[{i}]") for i, t in enumerate(data["tables"])), float(data["xi"]))


def save_policy(policy: JointPolicy, path) -> None:
    Path(path).write_text(json.dumps(policy_to_dict(policy)))


def load_policy(path) -> JointPolicy:
    return policy_from_dict(json.loads(Path(path).read_text()))
