"""Switching-gradient solvers for strongly convex constrained subproblems.

Two entry points share the same step/tolerance/weight machinery:

* :func:`run_inner_loop` solves one proximal subproblem of the multi-agent
  learner, every agent updating its own table from its own estimates.
* :func:`csa_generic` runs the single-problem switching method on a box or a
  product of simplices with user-supplied oracles.

Iterates are indexed ``k = 0..K`` inside the learner and ``k = 1..N`` in the
generic solver; the learner's iterate ``k`` uses schedule index ``k + 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .game import JointPolicy
from .sampling import RngStream

REWARD, COST = "reward", "cost"


class InvalidFloorError(ValueError):
    pass


# --------------------------------------------------------------------------
# projections


def project_simplex(y: np.ndarray, mass: float = 1.0) -> np.ndarray:
    """Euclidean projection of each row of ``y`` onto ``{p >= 0, sum p = mass}``."""
    y = np.asarray(y, dtype=float)
    if mass <= 0.0:
        return np.zeros_like(y)
    flat = y.reshape(-1, y.shape[-1])
    n = flat.shape[1]
    u = -np.sort(-flat, axis=1)
    css = np.cumsum(u, axis=1) - mass
    ind = np.arange(1, n + 1)
    cond = u - css / ind > 0
    cond[:, 0] = True  # holds exactly; rounding can lose it when mass is tiny
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(flat.shape[0]), rho] / (rho + 1)
    return np.maximum(flat - theta[:, None], 0.0).reshape(y.shape)


def project_floored_simplex(y: np.ndarray, xi: float = 0.0) -> np.ndarray:
    """Project each row onto ``{p : p_a >= xi/A, sum p = 1}``.

    Shifts by the floor and projects onto the simplex of mass ``1 - xi``.
    """
    if not 0.0 <= xi <= 1.0:
        raise InvalidFloorError(f"floor xi must lie in [0, 1], got {xi}")
    y = np.asarray(y, dtype=float)
    floor = xi / y.shape[-1]
    return project_simplex(y - floor, 1.0 - xi) + floor


def project_box(y: np.ndarray, lower, upper) -> np.ndarray:
    return np.clip(y, lower, upper)


# --------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class CsaSchedules:
    """Step sizes, tolerances and output weights for the switching method.

    With ``nu`` set the step is constant and ``delta`` the constant tolerance.
    Without it the strongly convex choices are used: ``nu_k = 2/(mu_b (k+1))``
    and ``delta_k = lam/sqrt(J) + (4 Delta^2/k + 16 M^2/mu^2) mu_b / (2k)``,
    where ``mu_b`` is the modulus of the branch taken at ``k``.

    ``output`` is ``"sample"`` (rho-weighted draw from the admissible window)
    or ``"last"`` (last iterate).
    """

    K: int
    nu: float | None = None
    delta: float = 0.0
    mu_F: float | None = None
    mu_G: float | None = None
    M: float | None = None
    diameter: float | None = None
    lam: float = 0.0
    J: int = 1
    window_start: int | None = None
    beta: float = 0.0
    output: str = "sample"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.nu is None:
            missing = [n for n in ("mu_F", "mu_G", "M", "diameter") if getattr(self, n) is None]
            if missing:
                raise ValueError(f"theoretical schedules need {missing}")
            if self.mu_F <= 0 or self.mu_G <= 0:
                raise ValueError("strong-convexity moduli must be positive")
        elif self.nu <= 0:
            raise ValueError("step size must be positive")
        if self.delta < 0:
            raise ValueError("tolerance must be non-negative")
        if self.output not in ("sample", "last"):
            raise ValueError("output must be 'sample' or 'last'")
        if self.window_start is not None and not 0 <= self.window_start <= self.K:
            raise ValueError("window start must lie in [0, K]")

    @property
    def theoretical(self) -> bool:
        return self.nu is None

    def _mu(self, branch: str) -> float | None:
        return self.mu_F if branch == REWARD else self.mu_G

    def step_size(self, k: int, branch: str) -> float:
        """Step at schedule index ``k >= 1``."""
        if not self.theoretical:
            return self.nu
        return 2.0 / (self._mu(branch) * (k + 1))

    def tolerance(self, k: int, branch: str) -> float:
        if not self.theoretical:
            return self.delta
        mu = min(self.mu_F, self.mu_G)
        return self.lam / math.sqrt(self.J) + (4.0 * self.diameter ** 2 / k + 16.0 * self.M ** 2 / mu ** 2) * self._mu(branch) / (2.0 * k)

    def weights(self, branches: Sequence[str]) -> np.ndarray:
        """``rho_k = nu_k / A_k`` with ``A_1 = 1``, ``A_k = (1 - a_k) A_{k-1}``, ``a_k = mu_b nu_k``.

        ``branches[k-1]`` is the branch decided at schedule index ``k``.  When
        no modulus is known (constant steps without ``mu_F``/``mu_G``) the
        weights reduce to ``nu_k``.
        """
        rho = np.empty(len(branches))
        big_a = 1.0
        for idx, branch in enumerate(branches):
            k = idx + 1
            nu = self.step_size(k, branch)
            mu = self._mu(branch)
            if k > 1 and mu is not None:
                big_a *= 1.0 - mu * nu
            rho[idx] = nu / big_a if big_a != 0 else np.inf
        return rho

    def window(self) -> int:
        return self.K // 2 if self.window_start is None else self.window_start


def theoretical_schedules(
    mu_F: float,
    mu_G: float,
    M: float,
    diameter: float,
    sigma: float,
    eps: float,
    f_max: float | None = None,
    K: int | None = None,
) -> CsaSchedules:
    """Schedules of the strongly convex switching method for target accuracy ``eps``.

    ``N`` and ``J`` follow the max-expressions of the convergence guarantee;
    ``K`` overrides the iteration count (``N``) when given.  The window starts
    at ``N/2``.  ``lam = sigma^2 log(N^2 / (4 f_max))`` clipped at zero.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min(mu_F, mu_G) <= 0:
        raise ValueError("moduli must be positive")
    mu = min(mu_F, mu_G)
    N = int(math.ceil(required_iterations(mu_F, mu_G, M, diameter, sigma, eps))) if K is None else int(K)
    if sigma > 0:
        if f_max is None or f_max <= 0:
            raise ValueError("noisy schedules need a positive objective bound f_max")
        lam = max(0.0, sigma ** 2 * math.log(N ** 2 / (4.0 * f_max)))
    else:
        lam = 0.0
    J = max(9.0 * lam ** 2 / eps ** 2, 32.0 * sigma * mu_F / (mu * eps ** 2), 1.0)
    return CsaSchedules(
        K=N, mu_F=mu_F, mu_G=mu_G, M=M, diameter=diameter, lam=lam, J=int(math.ceil(J)), window_start=max(1, N // 2)
    )


def required_iterations(mu_F, mu_G, M, diameter, sigma, eps) -> float:
    mu = min(mu_F, mu_G)
    return max(
        64.0 * mu_F * M ** 2 / (mu ** 2 * eps ** 2),
        math.sqrt(32.0 * diameter ** 2 * mu_F) / eps,
        32.0 * sigma * mu_F / (mu * eps ** 2),
    )


def select_index(
    values: Sequence[float], tolerances: Sequence[float], rho: Sequence[float], start: int, rng: np.random.Generator, first: int
) -> tuple[int, list[int]]:
    """Draw the output index from ``{k >= start : value_k <= tol_k}`` with probability ``∝ rho_k``.

    ``values[j]`` belongs to iterate ``first + j``.  Returns ``(k_hat, window)``;
    ``k_hat = 1`` when the window is empty.
    """
    members = [first + j for j, (v, d) in enumerate(zip(values, tolerances)) if first + j >= start and v <= d]
    if not members:
        return 1, members
    w = np.array([rho[k - first] for k in members], dtype=float)
    p = w / w.sum()
    return int(members[rng.choice(len(members), p=p)]), members


# --------------------------------------------------------------------------
# multi-agent inner loop


@dataclass
class Estimates:
    """What each agent sees at one inner iteration.

    ``value_cost`` is the shared constraint estimate (every agent observes
    the same cost stream); gradients are per agent.
    """

    value_cost: float
    grad_reward: list[np.ndarray]
    grad_cost: list[np.ndarray]
    value_reward: list[float] = field(default_factory=list)


Provider = Callable[[JointPolicy, int], Estimates]


def relaxed_feasible(value_cost: float, threshold: float, beta: float, tol: float) -> bool:
    """Switch test ``V_c + beta - alpha <= delta``; equality takes the reward branch."""
    return value_cost + beta - threshold <= tol


def inner_step(
    iterate: np.ndarray,
    anchor: np.ndarray,
    grad_reward: np.ndarray,
    grad_cost: np.ndarray,
    value_cost: float,
    step: float,
    tol: float,
    eta: float,
    threshold: float,
    beta: float = 0.0,
    xi: float = 0.0,
) -> tuple[np.ndarray, str]:
    """One agent's projected switching step; returns the new table and the branch."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    if iterate.shape != anchor.shape or grad_reward.shape != iterate.shape or grad_cost.shape != iterate.shape:
        raise ValueError("iterate, anchor and gradients must share a shape")
    branch = REWARD if relaxed_feasible(value_cost, threshold, beta, tol) else COST
    grad = grad_reward if branch == REWARD else grad_cost
    y = iterate - step * grad - (step / eta) * (iterate - anchor)
    return project_floored_simplex(y, xi), branch


@dataclass
class InnerRecord:
    k: int
    branch: str
    value_cost: float
    tolerance: float
    step_norm: float


@dataclass
class InnerResult:
    policy: JointPolicy
    k_hat: int
    window: list[int]
    records: list[InnerRecord]
    iterates: list[JointPolicy] | None = None

    @property
    def cost_branch_fraction(self) -> float:
        if not self.records:
            return 0.0
        return sum(r.branch == COST for r in self.records) / len(self.records)


def run_inner_loop(
    anchor: JointPolicy,
    provider: Provider,
    schedules: CsaSchedules,
    eta: float,
    threshold: float,
    xi: float,
    index_stream: RngStream,
    membership: str = "printed",
    keep_iterates: bool = False,
) -> InnerResult:
    """Run ``K`` simultaneous switching steps for every agent and pick the output.

    ``membership`` selects the admissible-window test: ``"printed"`` keeps
    iterates with ``V_c <= delta_k``; ``"relaxed"`` uses the switch test
    ``V_c + beta - alpha <= delta_k``.
    """
    if membership not in ("printed", "relaxed"):
        raise ValueError("membership must be 'printed' or 'relaxed'")
    K, beta = schedules.K, schedules.beta
    current = anchor
    iterates = [anchor]
    records: list[InnerRecord] = []
    values: list[float] = []
    tolerances: list[float] = []
    branches: list[str] = []

    def admissible_value(v_c):
        return v_c if membership == "printed" else v_c + beta - threshold

    for k in range(K):
        est = provider(current, k)
        # branch decided once from the shared estimate; delta_k carries the reward-branch modulus
        probe = schedules.tolerance(k + 1, REWARD)
        branch = REWARD if relaxed_feasible(est.value_cost, threshold, beta, probe) else COST
        tol = schedules.tolerance(k + 1, branch)
        step = schedules.step_size(k + 1, branch)
        tables = []
        for i in range(len(current)):
            new, taken = inner_step(
                current[i], anchor[i], est.grad_reward[i], est.grad_cost[i], est.value_cost, step, tol, eta, threshold, beta, xi
            )
            assert taken == branch, "agents must agree on the branch"
            tables.append(new)
        nxt = JointPolicy(tuple(tables), xi)
        records.append(InnerRecord(k, branch, est.value_cost, tol, current.distance(nxt)))
        values.append(admissible_value(est.value_cost))
        tolerances.append(tol)
        branches.append(branch)
        current = nxt
        iterates.append(current)

    if schedules.output == "last":
        return InnerResult(current, K, [], records, iterates if keep_iterates else None)

    # the final iterate needs its own constraint estimate for window membership
    est = provider(current, K)
    probe = schedules.tolerance(K + 1, REWARD)
    final_branch = REWARD if relaxed_feasible(est.value_cost, threshold, beta, probe) else COST
    values.append(admissible_value(est.value_cost))
    tolerances.append(schedules.tolerance(K + 1, final_branch))
    branches.append(final_branch)
    rho = schedules.weights(branches)
    k_hat, window = select_index(values, tolerances, rho, schedules.window(), index_stream.generator(), first=0)
    return InnerResult(iterates[k_hat], k_hat, window, records, iterates if keep_iterates else None)


# --------------------------------------------------------------------------
# generic problem


@dataclass
class GenericCsaProblem:
    """``min f(x)`` s.t. ``g(x) <= 0`` over a box or a product of simplices.

    ``objective_grad(x, rng)`` and ``constraint_grad(x, rng)`` return (possibly
    noisy) gradients; ``constraint_value(x, rng)`` one unbiased sample of ``g``.
    ``objective`` / ``constraint`` (exact, optional) are only used for the
    recorded history.
    """

    objective_grad: Callable
    constraint_grad: Callable
    constraint_value: Callable
    x0: np.ndarray
    mu_F: float
    mu_G: float
    M: float
    diameter: float
    sigma: float = 0.0
    lower: float | np.ndarray | None = None
    upper: float | np.ndarray | None = None
    simplex_rows: bool = False
    objective: Callable | None = None
    constraint: Callable | None = None

    def __post_init__(self):
        if self.mu_F <= 0 or self.mu_G <= 0:
            raise ValueError("moduli must be positive")
        if self.diameter <= 0:
            raise ValueError("diameter must be positive")

    def project(self, x: np.ndarray) -> np.ndarray:
        if self.simplex_rows:
            return project_simplex(x)
        return project_box(x, self.lower, self.upper)


class InfeasibleStartError(ValueError):
    pass


@dataclass
class CsaResult:
    x: np.ndarray
    k_hat: int
    window: list[int]
    iterates: np.ndarray
    weights: np.ndarray
    estimates: np.ndarray
    tolerances: np.ndarray
    branches: list[str]
    objective_history: np.ndarray | None = None
    constraint_history: np.ndarray | None = None

    def output_law(self) -> tuple[np.ndarray, np.ndarray]:
        """Indices and probabilities of the output draw."""
        if not self.window:
            return np.array([1]), np.array([1.0])
        idx = np.array(self.window)
        w = self.weights[idx - 1]
        return idx, w / w.sum()

    def expected(self, fn: Callable[[np.ndarray], float]) -> float:
        """``E[fn(x_khat)]`` over the output law."""
        idx, p = self.output_law()
        return float(sum(pk * fn(self.iterates[k - 1]) for k, pk in zip(idx, p)))


def csa_generic(
    problem: GenericCsaProblem,
    schedules: CsaSchedules,
    stream: RngStream,
    eps: float | None = None,
) -> CsaResult:
    """Switching method with a batch-mean constraint check and rho-weighted output.

    ``schedules.K`` is the number of iterates ``N``; each check averages
    ``schedules.J`` constraint samples.  When ``eps`` is given the start must
    satisfy ``g(x_1) <= eps`` (checked with the exact ``problem.constraint``).
    """
    rng = stream.child("oracle").generator()
    x = problem.project(np.asarray(problem.x0, dtype=float))
    if eps is not None and problem.constraint is not None and problem.constraint(x) > eps:
        raise InfeasibleStartError(f"g(x_1) = {problem.constraint(x):.4g} exceeds eps = {eps:.4g}")
    N, J = schedules.K, max(1, int(schedules.J))
    iterates = np.empty((N,) + x.shape)
    est = np.empty(N)
    tols = np.empty(N)
    branches: list[str] = []
    for k in range(1, N + 1):
        iterates[k - 1] = x
        g_hat = float(np.mean([problem.constraint_value(x, rng) for _ in range(J)]))
        probe = schedules.tolerance(k, REWARD)
        branch = REWARD if g_hat <= probe else COST
        tol = probe if branch == REWARD else schedules.tolerance(k, COST)
        est[k - 1], tols[k - 1] = g_hat, tol
        branches.append(branch)
        if k == N:
            break
        nu = schedules.step_size(k, branch)
        grad = problem.objective_grad(x, rng) if branch == REWARD else problem.constraint_grad(x, rng)
        x = problem.project(x - nu * grad)

    rho = schedules.weights(branches)
    passed = np.where(np.array(branches) == REWARD, est, np.inf)
    k_hat, window = select_index(passed, tols, rho, schedules.window() or 1, stream.child("index").generator(), first=1)
    obj_hist = np.array([problem.objective(z) for z in iterates]) if problem.objective else None
    con_hist = np.array([problem.constraint(z) for z in iterates]) if problem.constraint else None
    return CsaResult(iterates[k_hat - 1].copy(), k_hat, window, iterates, rho, est, tols, branches, obj_hist, con_hist)
