"""Independent proximal-point learner for constrained Markov potential games.

Every outer iteration approximately solves

    min_pi  Phi(pi) + ||pi - pi_t||^2 / (2 eta)
    s.t.    V_c(pi) + ||pi - pi_t||^2 / (2 eta) + beta <= alpha

with the switching inner loop in :mod:`cmpg.csa`, each agent using only its
own gradient and the shared cost estimate.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .csa import COST, CsaSchedules, Estimates, InnerResult, run_inner_loop
from .environments import PotentialSpec
from .game import GameSpec, JointPolicy, exact_bundle, exact_value, save_policy, theoretical_constants
from .sampling import ESTIMATORS, PER_TRAJECTORY, PRODUCT_OF_MEANS, RngStream, estimate_all, simulate_batch

EXACT, STOCHASTIC = "exact", "stochastic"


class InfeasibleStartError(ValueError):
    """The initial policy does not strictly satisfy the constraint."""


class InnerLoopError(RuntimeError):
    pass


@dataclass(frozen=True)
class IProxConfig:
    eta: float
    nu: float | None = None
    beta: float = 0.0
    xi: float = 0.0
    T: int = 20
    K: int = 20
    batch: int = 1000
    mode: str = STOCHASTIC
    delta: float = 0.0
    output: str = "last"
    seed: int = 0
    env: str = ""
    stop_tol: float = 0.0
    estimator: str = PER_TRAJECTORY
    membership: str = "printed"
    # theoretical inner schedules (used when nu is None)
    mu_F: float | None = None
    mu_G: float | None = None
    M: float | None = None
    diameter: float | None = None
    lam: float = 0.0
    J: int = 1

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not 0.0 <= self.xi < 1.0:
            raise ValueError("xi must lie in [0, 1)")
        if self.T < 0 or self.K < 1 or self.batch < 1:
            raise ValueError("T must be >= 0 and K, batch >= 1")
        if self.mode not in (EXACT, STOCHASTIC):
            raise ValueError(f"mode must be {EXACT!r} or {STOCHASTIC!r}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        self.schedules()  # validates the inner-loop settings

    def schedules(self) -> CsaSchedules:
        return CsaSchedules(
            K=self.K,
            nu=self.nu,
            delta=self.delta,
            mu_F=self.mu_F,
            mu_G=self.mu_G,
            M=self.M,
            diameter=self.diameter,
            lam=self.lam,
            J=self.J,
            beta=self.beta,
            output=self.output,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# presets

PRACTICAL_TABLE = {
    # env -> (eta, {m: nu}, {m: batch}, K, T)
    "pollution_tax": (0.1, {2: 0.005, 4: 0.002, 8: 0.0007}, {2: 1000, 4: 1000, 8: 2500}, 20, 20),
    "energy_marketplace": (0.1, {2: 0.002, 4: 0.001, 8: 0.0003}, {2: 100, 4: 150, 8: 200}, 20, 60),
}
PRACTICAL_XI = 0.1


def practical_config(env: str, m: int, seed: int = 0, **overrides) -> IProxConfig:
    """Hyper-parameters used for the simulation studies (constant steps, delta = 0, last iterate)."""
    try:
        eta, nus, batches, K, T = PRACTICAL_TABLE[env]
    except KeyError:
        raise ValueError(f"no practical preset for environment {env!r}") from None
    if m not in nus:
        raise ValueError(f"practical presets exist for m in {sorted(nus)}, got {m}")
    base = dict(
        eta=eta, nu=nus[m], batch=batches[m], K=K, T=T, beta=0.0, xi=PRACTICAL_XI, delta=0.0,
        output="last", mode=STOCHASTIC, seed=seed, env=env, estimator=PER_TRAJECTORY,
    )
    base.update(overrides)
    return IProxConfig(**base)


def initial_policy(spec: GameSpec, xi: float = 0.0) -> JointPolicy:
    """Starting policy used by the presets.

    Pollution tax starts uniform (strictly feasible with slack 2 at the default
    threshold); the marketplace starts from the xi-floored "contribute nothing"
    policy because the uniform one violates the energy bound.
    """
    if spec.name == "energy_marketplace":
        zeros = [np.zeros(spec.num_states, dtype=int) for _ in range(spec.num_agents)]
        return JointPolicy.deterministic(spec, zeros, xi)
    return JointPolicy.uniform(spec)


def default_config(spec: GameSpec, eps: float, mode: str = EXACT, seed: int = 0, **overrides) -> IProxConfig:
    """Theory-shaped configuration for accuracy ``eps``.

    ``eta = 1/(2 L)``, ``beta = eps``.  Exact mode uses ``T = K = ceil(eps^-2)``;
    stochastic mode ``T = ceil(eps^-2)``, ``K = ceil(eps^-3)``, ``B = ceil(eps^-2)``
    and floor ``xi = eps * sqrt(2 eta)``.  Inner steps follow the strongly convex schedule with
    modulus ``L`` on both branches.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    const = theoretical_constants(spec)
    L, diam = const.smoothness, const.diameter
    M = math.sqrt(const.lipschitz ** 2 + L ** 2 * diam ** 4)
    T = math.ceil(eps ** -2)
    base = dict(
        eta=const.eta, nu=None, beta=eps, mode=mode, seed=seed, env=spec.name, output="sample",
        mu_F=L, mu_G=L, M=M, diameter=diam, T=T, estimator=PER_TRAJECTORY,
    )
    if mode == EXACT:
        base.update(K=T, xi=0.0, batch=1)
    else:
        sigma = 1.0 / (1.0 - const.gamma)
        lam = max(0.0, sigma ** 2 * math.log(T ** 2 / (4.0 * max(const.potential_bound, 1e-12))))
        base.update(K=math.ceil(eps ** -3), batch=math.ceil(eps ** -2), xi=min(eps * math.sqrt(2.0 * const.eta), 0.5), lam=lam, J=math.ceil(eps ** -2))
    base.update(overrides)
    return IProxConfig(**base)


# --------------------------------------------------------------------------
# providers


def exact_provider(spec: GameSpec) -> Callable[[JointPolicy, int], Estimates]:
    def provide(policy: JointPolicy, k: int) -> Estimates:
        values, grads_r, grads_c = exact_bundle(spec, policy)
        return Estimates(float(values[-1]), grads_r, grads_c, [float(v) for v in values[:-1]])

    return provide


def stochastic_provider(spec: GameSpec, batch: int, stream: RngStream, estimator: str) -> Callable[[JointPolicy, int], Estimates]:
    """Batch estimates from one set of shared joint episodes per inner iteration."""

    def provide(policy: JointPolicy, k: int) -> Estimates:
        ests = estimate_all(spec, policy, batch, stream.child("inner", k), estimator)
        return Estimates(
            ests[0].value_cost,
            [e.grad_reward for e in ests],
            [e.grad_cost for e in ests],
            [e.value_reward for e in ests],
        )

    return provide


# --------------------------------------------------------------------------
# feasibility and potential helpers


@dataclass
class FeasibilityReport:
    slack: float
    value_cost: float
    std_error: float = 0.0


def check_initial_feasibility(
    spec: GameSpec, policy: JointPolicy, mode: str = EXACT, batch: int = 10_000, stream: RngStream | None = None
) -> FeasibilityReport:
    """Slack ``alpha - V_c(pi_0)``; raises when it is not strictly positive."""
    if mode == EXACT:
        v_c, se = exact_value(spec, policy, "cost").value, 0.0
    else:
        stream = stream or RngStream(0, ("feasibility",))
        b = simulate_batch(spec, policy, batch, stream)
        v_c = float(b.cost_returns.mean())
        se = float(b.cost_returns.std(ddof=1) / math.sqrt(batch)) if batch > 1 else 0.0
    slack = spec.threshold - v_c
    if not slack > 0:
        raise InfeasibleStartError(f"initial policy has V_c = {v_c:.6g} >= alpha = {spec.threshold:.6g}")
    return FeasibilityReport(slack, v_c, se)


def resolve_potential(spec: GameSpec, potential: PotentialSpec | None) -> PotentialSpec:
    """Diagnostic potential: the given one unless falsified, else common reward or welfare."""
    if potential is not None and potential.status != "falsified":
        return potential
    if np.all(spec.rewards == spec.rewards[0]):
        return PotentialSpec(spec.rewards[0].copy(), "verified", 0.0, "common_value")
    return PotentialSpec(spec.rewards.sum(axis=0), "unchecked", None, "social_welfare")


# --------------------------------------------------------------------------
# outer loop


@dataclass
class RunRecord:
    t: int
    potential: float
    constraint: float
    nash_gap: float | None = None
    branch_cost_frac: float | None = None
    wall_s: float | None = None
    seed: int = 0
    config_hash: str = ""
    potential_label: str = "potential"
    prox_distance: float | None = None
    k_hat: int | None = None
    potential_internal: float | None = None


@dataclass
class RunResult:
    policy: JointPolicy
    records: list[RunRecord]
    policies: list[JointPolicy]
    inner: list[InnerResult] = field(default_factory=list)
    stopped_early: bool = False

    def best_by_gap(self) -> tuple[int, JointPolicy] | None:
        gaps = [(r.nash_gap, r.t) for r in self.records if r.nash_gap is not None and np.isfinite(r.nash_gap)]
        if not gaps:
            return None
        _, t = min(gaps)
        return t, self.policies[t]


def run(
    spec: GameSpec,
    initial: JointPolicy,
    config: IProxConfig,
    potential: PotentialSpec | None = None,
    hooks: list[Callable[[RunRecord, JointPolicy], None]] | None = None,
    eval_gap: bool = False,
    eval_every: int = 1,
    keep_inner: bool = False,
    checkpoint_path=None,
    checkpoint_every: int = 0,
    gap_spec: GameSpec | None = None,
    config_hash: str | None = None,
) -> RunResult:
    """Run ``config.T`` outer proximal iterations from ``initial``.

    Metrics are exact (``exact_value``) for both horizon models.  The Nash gap
    is evaluated every ``eval_every`` iterations when ``eval_gap`` is set, on
    ``gap_spec`` (default ``spec``; it must use random stopping).  With
    ``checkpoint_every > 0`` the current policy is written to
    ``checkpoint_path`` every that many outer iterations.
    """
    from .equilibrium import nash_gap  # local: equilibrium imports environments

    check_initial_feasibility(spec, initial, EXACT)
    pot = resolve_potential(spec, potential)
    root = RngStream(config.seed, ("run",))
    schedules = config.schedules()
    digest = config_hash or config.digest()
    gap_spec = gap_spec or spec
    hooks = hooks or []
    if config.mode == EXACT:
        provider_for = lambda t: exact_provider(spec)  # noqa: E731
    else:
        provider_for = lambda t: stochastic_provider(spec, config.batch, root.child("outer", t), config.estimator)  # noqa: E731

    def metrics(t, policy, inner=None, dist=None, elapsed=None):
        phi = exact_value(spec, policy, pot.table).value
        gap = None
        if eval_gap and t % eval_every == 0:
            gap = nash_gap(gap_spec, policy).nash_gap
        return RunRecord(
            t=t,
            potential=spec.sign * phi,
            constraint=exact_value(spec, policy, "cost").value,
            nash_gap=gap,
            branch_cost_frac=None if inner is None else inner.cost_branch_fraction,
            wall_s=elapsed,
            seed=config.seed,
            config_hash=digest,
            potential_label=pot.label,
            prox_distance=dist,
            k_hat=None if inner is None else inner.k_hat,
            potential_internal=phi,
        )

    current = initial
    records = [metrics(0, current)]
    policies = [current]
    inners = []
    for hook in hooks:
        hook(records[0], current)
    stopped = False
    for t in range(config.T):
        start = time.perf_counter()
        try:
            inner = run_inner_loop(
                current, provider_for(t), schedules, config.eta, spec.threshold, config.xi,
                root.child("shared-index", t), membership=config.membership, keep_iterates=keep_inner,
            )
        except Exception as exc:
            raise InnerLoopError(f"inner loop failed at outer iteration {t}: {exc}") from exc
        elapsed = time.perf_counter() - start
        dist = inner.policy.distance(current)
        current = inner.policy
        rec = metrics(t + 1, current, inner, dist, elapsed)
        records.append(rec)
        policies.append(current)
        if keep_inner:
            inners.append(inner)
        for hook in hooks:
            hook(rec, current)
        if checkpoint_every > 0 and checkpoint_path is not None and (t + 1) % checkpoint_every == 0:
            save_policy(current, checkpoint_path)
        if config.stop_tol > 0 and dist <= config.stop_tol:
            stopped = True
            break
    return RunResult(current, records, policies, inners, stopped)


def constraint_branch_count(inner: InnerResult) -> int:
    return sum(r.branch == COST for r in inner.records)


__all__ = [
    "EXACT",
    "STOCHASTIC",
    "IProxConfig",
    "InfeasibleStartError",
    "RunRecord",
    "RunResult",
    "check_initial_feasibility",
    "default_config",
    "exact_provider",
    "initial_policy",
    "practical_config",
    "resolve_potential",
    "run",
    "stochastic_provider",
    "PRODUCT_OF_MEANS",
    "PER_TRAJECTORY",
]
