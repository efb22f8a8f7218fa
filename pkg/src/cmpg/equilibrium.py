"""Exact equilibrium diagnostics for random-stopping games.

Best responses hold every other agent fixed, which turns player i's problem
into a single-agent constrained MDP.  That CMDP is solved exactly as a linear
program over occupancy measures; a Lagrangian bisection over exact MDP solves
serves as an independent cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .environments import PotentialSpec
from .game import (
    GameSpec,
    JointPolicy,
    SingularSystemError,
    _require_random_stopping,
    exact_value,
)

LP_TOL = 1e-9


class EmptyFeasibleSetError(ValueError):
    """No policy of the deviating player satisfies the constraint."""


@dataclass(frozen=True)
class InducedCMDP:
    """Single-agent view of player i with the other players' policies fixed."""

    transitions: np.ndarray  # (S, A_i, S)
    reward: np.ndarray  # (S, A_i)
    cost: np.ndarray  # (S, A_i)
    initial_dist: np.ndarray
    threshold: float


def induced_cmdp(spec: GameSpec, policy: JointPolicy, agent: int) -> InducedCMDP:
    others = policy.others_probs(spec, agent)
    acts = spec.agent_actions()[agent]
    A = spec.action_counts[agent]
    onehot = (acts[:, None] == np.arange(A)[None, :]).astype(float)  # (J, A)
    reward = (others * spec.rewards[agent]) @ onehot
    cost = (others * spec.cost) @ onehot
    trans = np.einsum("sj,sjt,ja->sat", others, spec.transitions, onehot)
    return InducedCMDP(trans, reward, cost, spec.initial_dist.copy(), spec.threshold)


@dataclass
class BestResponse:
    value: float
    policy: np.ndarray | None
    occupancy: np.ndarray | None
    flow_residual: float = 0.0
    dual: float | None = None
    status: str = "optimal"


def best_response_lp(cmdp: InducedCMDP) -> BestResponse:
    """Minimise the induced reward value subject to the cost value bound."""
    P, r, c = cmdp.transitions, cmdp.reward, cmdp.cost
    S, A = r.shape
    n = S * A
    # flow: sum_a rho(s',a) - sum_{s,a} rho(s,a) P(s'|s,a) = mu(s')
    a_eq = np.zeros((S, n))
    for s in range(S):
        a_eq[s, s * A:(s + 1) * A] += 1.0
    a_eq -= P.reshape(n, S).T
    constrained = np.isfinite(cmdp.threshold)
    res = linprog(
        r.ravel(),
        A_ub=c.ravel()[None, :] if constrained else None,
        b_ub=[cmdp.threshold] if constrained else None,
        A_eq=a_eq,
        b_eq=cmdp.initial_dist,
        bounds=(0, None),
        method="highs",
    )
    if res.status == 2:
        return BestResponse(np.nan, None, None, status="infeasible")
    if res.status != 0:
        raise RuntimeError(f"occupancy LP failed: {res.message}")
    rho = np.maximum(res.x.reshape(S, A), 0.0)
    mass = rho.sum(axis=1, keepdims=True)
    pol = np.where(mass > 1e-300, rho / np.where(mass > 1e-300, mass, 1.0), 1.0 / A)
    residual = float(np.abs(a_eq @ rho.ravel() - cmdp.initial_dist).max())
    dual = None
    if constrained and res.ineqlin is not None:
        dual = float(-res.ineqlin.marginals[0])
    return BestResponse(float(res.fun), pol, rho, residual, dual)


def _single_agent_eval(cmdp: InducedCMDP, pol: np.ndarray, payoff: np.ndarray) -> float:
    S = payoff.shape[0]
    p_pi = np.einsum("sa,sat->st", pol, cmdp.transitions)
    r_pi = (pol * payoff).sum(axis=1)
    return float(cmdp.initial_dist @ np.linalg.solve(np.eye(S) - p_pi, r_pi))


def solve_mdp(transitions: np.ndarray, payoff: np.ndarray, max_iter: int = 1000) -> np.ndarray:
    """Exact minimising deterministic policy by policy iteration (``(S, A)`` one-hot)."""
    S, A = payoff.shape
    choice = np.zeros(S, dtype=int)
    for _ in range(max_iter):
        p_pi = transitions[np.arange(S), choice]
        v = np.linalg.solve(np.eye(S) - p_pi, payoff[np.arange(S), choice])
        q = payoff + transitions @ v
        current = q[np.arange(S), choice]
        better = q.min(axis=1) < current - 1e-12 * (1.0 + np.abs(current))
        if not better.any():
            break
        choice = np.where(better, q.argmin(axis=1), choice)
    pol = np.zeros((S, A))
    pol[np.arange(S), choice] = 1.0
    return pol


def best_response_bisection(cmdp: InducedCMDP, tol: float = 1e-12, max_iter: int = 200) -> BestResponse:
    """Constrained best response via bisection on the Lagrange multiplier.

    Each probe solves the MDP with payoff ``reward + lam * cost`` exactly; at
    the optimal multiplier the optimum mixes the two bracketing deterministic
    policies so that the constraint is tight.
    """

    def probe(lam):
        pol = solve_mdp(cmdp.transitions, cmdp.reward + lam * cmdp.cost)
        return pol, _single_agent_eval(cmdp, pol, cmdp.reward), _single_agent_eval(cmdp, pol, cmdp.cost)

    alpha = cmdp.threshold
    pol0, r0, c0 = probe(0.0)
    if c0 <= alpha:
        return BestResponse(r0, pol0, None, dual=0.0)

    # smallest achievable cost decides feasibility
    pol_c = solve_mdp(cmdp.transitions, cmdp.cost)
    c_min = _single_agent_eval(cmdp, pol_c, cmdp.cost)
    if c_min > alpha + 1e-12:
        return BestResponse(np.nan, None, None, status="infeasible")

    lo, hi = 0.0, 1.0
    pol_hi, r_hi, c_hi = probe(hi)
    while c_hi > alpha:
        lo, hi = hi, hi * 2.0
        pol_hi, r_hi, c_hi = probe(hi)
        if hi > 1e12:
            # constraint only attainable at the boundary; lexicographic optimum
            return BestResponse(r_hi, pol_hi, None, dual=np.inf, status="boundary")
    pol_lo, r_lo, c_lo = probe(lo)
    for _ in range(max_iter):
        if hi - lo <= tol * max(1.0, hi):
            break
        mid = 0.5 * (lo + hi)
        pol_m, r_m, c_m = probe(mid)
        if c_m > alpha:
            lo, pol_lo, r_lo, c_lo = mid, pol_m, r_m, c_m
        else:
            hi, pol_hi, r_hi, c_hi = mid, pol_m, r_m, c_m
    lam = 0.5 * (lo + hi)
    # dual value at lam from the better of the two bracketing solutions
    q_lo = r_lo + lam * (c_lo - alpha)
    q_hi = r_hi + lam * (c_hi - alpha)
    value = min(q_lo, q_hi)
    # mix the bracketing policies' occupancies so the cost is exactly alpha
    w = 1.0 if c_lo == c_hi else (alpha - c_hi) / (c_lo - c_hi)
    w = float(np.clip(w, 0.0, 1.0))
    return BestResponse(value, _mix_policies(cmdp, pol_lo, pol_hi, w), None, dual=lam)


def _occupancy(cmdp: InducedCMDP, pol: np.ndarray) -> np.ndarray:
    S = pol.shape[0]
    p_pi = np.einsum("sa,sat->st", pol, cmdp.transitions)
    d = np.linalg.solve(np.eye(S) - p_pi.T, cmdp.initial_dist)
    return d[:, None] * pol


def _mix_policies(cmdp: InducedCMDP, pol_a, pol_b, w: float) -> np.ndarray:
    rho = w * _occupancy(cmdp, pol_a) + (1.0 - w) * _occupancy(cmdp, pol_b)
    mass = rho.sum(axis=1, keepdims=True)
    A = rho.shape[1]
    return np.where(mass > 0, rho / np.where(mass > 0, mass, 1.0), 1.0 / A)


def best_response_feasible_value(spec: GameSpec, policy: JointPolicy, agent: int) -> BestResponse:
    """Exact constrained best response of ``agent`` against the others' policies."""
    _require_random_stopping(spec, "best_response_feasible_value")
    return best_response_lp(induced_cmdp(spec, policy, agent))


@dataclass
class EquilibriumReport:
    exploitability: list[float]
    nash_gap: float
    constraint_value: float
    feasible: bool
    duals: list[float | None] = field(default_factory=list)
    statuses: list[str] = field(default_factory=list)

    def row(self) -> dict:
        out = {f"eps_{i}": e for i, e in enumerate(self.exploitability)}
        out.update(nash_gap=self.nash_gap, constraint=self.constraint_value, feasible=int(self.feasible))
        return out


def nash_gap(spec: GameSpec, policy: JointPolicy, feasibility_tol: float = 1e-9) -> EquilibriumReport:
    """Constrained Nash gap: largest gain any player gets from a feasible unilateral deviation.

    Players whose feasible deviation set is empty report ``nan`` with status
    ``"empty"``; the gap is then taken over the remaining players.
    """
    _require_random_stopping(spec, "nash_gap")
    v_c = exact_value(spec, policy, "cost").value
    eps, duals, statuses = [], [], []
    for i in range(spec.num_agents):
        v_i = exact_value(spec, policy, i).value
        br = best_response_feasible_value(spec, policy, i)
        if br.status == "infeasible":
            eps.append(np.nan)
            duals.append(None)
            statuses.append("empty")
            continue
        eps.append(v_i - br.value)
        duals.append(br.dual)
        statuses.append(br.status)
    finite = [e for e in eps if np.isfinite(e)]
    gap = max(finite) if finite else np.nan
    return EquilibriumReport(eps, gap, v_c, v_c <= spec.threshold + feasibility_tol, duals, statuses)


# --------------------------------------------------------------------------
# potentials


def potential_value(spec: GameSpec, potential: PotentialSpec, policy: JointPolicy) -> float:
    """``Phi(pi) = E[sum_t phi_{s_t}(a_t)]`` computed exactly."""
    table = np.asarray(potential.table, dtype=float)
    if table.shape != (spec.num_states, spec.num_joint):
        raise ValueError(f"potential table has shape {table.shape}, expected {(spec.num_states, spec.num_joint)}")
    return exact_value(spec, policy, table).value


def random_policy(spec: GameSpec, rng: np.random.Generator) -> JointPolicy:
    return JointPolicy(tuple(rng.dirichlet(np.ones(a), size=spec.num_states) for a in spec.action_counts))


def verify_mpg(
    spec: GameSpec, potential: PotentialSpec, trials: int = 100, tol: float = 1e-9, seed: int = 0
) -> PotentialSpec:
    """Check ``V_i(pi) - V_i(pi'_i, pi_-i) = Phi(pi) - Phi(pi'_i, pi_-i)`` on random triples.

    Returns a new :class:`PotentialSpec` with the status and the largest
    observed deviation.
    """
    _require_random_stopping(spec, "verify_mpg")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        pi = random_policy(spec, rng)
        i = int(rng.integers(spec.num_agents))
        dev = pi.replace(i, rng.dirichlet(np.ones(spec.action_counts[i]), size=spec.num_states))
        dv = exact_value(spec, pi, i).value - exact_value(spec, dev, i).value
        dphi = potential_value(spec, potential, pi) - potential_value(spec, potential, dev)
        worst = max(worst, abs(dv - dphi))
    status = "verified" if worst <= tol else "falsified"
    return PotentialSpec(potential.table, status, worst, potential.label)


def social_welfare(spec: GameSpec) -> PotentialSpec:
    """Sum of all agents' rewards, used as a labelled stand-in when no potential verifies."""
    return PotentialSpec(spec.rewards.sum(axis=0), "unchecked", None, "social_welfare")


__all__ = [
    "BestResponse",
    "EmptyFeasibleSetError",
    "EquilibriumReport",
    "InducedCMDP",
    "SingularSystemError",
    "best_response_bisection",
    "best_response_feasible_value",
    "best_response_lp",
    "induced_cmdp",
    "nash_gap",
    "potential_value",
    "random_policy",
    "social_welfare",
    "solve_mdp",
    "verify_mpg",
]
