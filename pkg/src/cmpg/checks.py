"""Structural invariant suite run by the ``check`` subcommand."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .csa import COST, REWARD, CsaSchedules, project_floored_simplex, relaxed_feasible, run_inner_loop
from .environments import ENVIRONMENTS, build_environment
from .equilibrium import random_policy
from .game import JointPolicy, validate_spec, visitation
from .iprox import stochastic_provider
from .sampling import PER_TRAJECTORY, RngStream


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}" + (f": {self.detail}" if self.detail else "")


def check_projection(trials: int = 200, seed: int = 0) -> CheckResult:
    """KKT conditions and idempotence of the floored-simplex projection."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        A = int(rng.integers(1, 7))
        xi = float(rng.uniform(0, 1))
        y = rng.normal(scale=3.0, size=(1, A))
        p = project_floored_simplex(y, xi)[0]
        floor = xi / A
        # feasibility
        worst = max(worst, abs(p.sum() - 1.0), max(0.0, floor - p.min()))
        # KKT: y - p = tau*1 - lambda with lambda >= 0 supported on active entries
        r = y[0] - p
        free = p > floor + 1e-12
        tau = r[free].mean() if free.any() else r.max()
        if free.any():
            worst = max(worst, np.abs(r[free] - tau).max())
        worst = max(worst, max(0.0, (r[~free] - tau).max(initial=-np.inf)))
        # idempotence
        worst = max(worst, np.abs(project_floored_simplex(p[None], xi)[0] - p).max())
    return CheckResult("projection KKT and idempotence", worst <= 1e-10, f"max residual {worst:.2e}")


def check_visitation_mass(games: int = 10, seed: int = 0) -> CheckResult:
    """``sum_s d(s) = 1/(1-gamma)`` when every state-action stops with probability ``1-gamma``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for g in range(games):
        gamma = float(rng.uniform(0.5, 0.95))
        spec, _ = build_environment("random_identical", seed=g, S=3, A=2, gamma=gamma)
        pi = random_policy(spec, rng)
        worst = max(worst, abs(visitation(spec, pi).sum() - 1.0 / (1.0 - gamma)))
    return CheckResult("visitation mass 1/(1-gamma)", worst <= 1e-9, f"max error {worst:.2e}")


def check_branches(seed: int = 0) -> CheckResult:
    """Every inner iteration applies the switch rule to the shared estimate and all agents agree.

    Also checks that the output index comes from the shared substream: two
    runs with the same stream pick the same ``k_hat`` and every agent's output
    table is the one at that index.
    """
    spec, _ = build_environment("random_identical", seed=seed, S=2, A=2, threshold=4.0)
    anchor = JointPolicy.uniform(spec)
    sched = CsaSchedules(K=12, nu=0.01, delta=0.0, output="sample", window_start=0)
    problems = []
    runs = []
    for _ in range(2):
        provider = stochastic_provider(spec, 200, RngStream(seed, ("check", "inner")), PER_TRAJECTORY)
        try:
            res = run_inner_loop(
                anchor, provider, sched, eta=0.1, threshold=spec.threshold, xi=0.1,
                index_stream=RngStream(seed, ("check", "shared-index")), membership="relaxed", keep_iterates=True,
            )
        except AssertionError as exc:
            return CheckResult("branch consistency and shared k_hat", False, str(exc))
        runs.append(res)
    res = runs[0]
    for rec in res.records:
        expected = REWARD if relaxed_feasible(rec.value_cost, spec.threshold, 0.0, rec.tolerance) else COST
        if rec.branch != expected:
            problems.append(f"k={rec.k} took {rec.branch}, rule gives {expected}")
    if runs[0].k_hat != runs[1].k_hat:
        problems.append("k_hat differs between identical runs")
    chosen = res.iterates[res.k_hat]
    for i in range(spec.num_agents):
        if not np.array_equal(res.policy[i], chosen[i]):
            problems.append(f"agent {i} output is not the iterate at k_hat")
    if res.window and res.k_hat not in res.window:
        problems.append("k_hat outside the admissible window")
    return CheckResult("branch consistency and shared k_hat", not problems, "; ".join(problems))


def check_builtin_specs() -> CheckResult:
    problems = []
    for env_id, (params_cls, _) in ENVIRONMENTS.items():
        has_horizon = "horizon" in {f.name for f in dataclasses.fields(params_cls)}
        for horizon in (None, 10) if has_horizon else (None,):
            spec, pot = build_environment(env_id, **({"horizon": horizon} if has_horizon else {}))
            issues = validate_spec(spec)
            if pot.table.shape != (spec.num_states, spec.num_joint):
                issues.append("potential table shape mismatch")
            if issues:
                problems.append(f"{env_id} (horizon={horizon}): {issues}")
    return CheckResult("spec validation on built-in environments", not problems, "; ".join(problems))


CHECKS: list[Callable[[], CheckResult]] = [check_projection, check_visitation_mass, check_branches, check_builtin_specs]


def run_checks() -> list[CheckResult]:
    results = []
    for fn in CHECKS:
        try:
            results.append(fn())
        except Exception as exc:
            results.append(CheckResult(fn.__name__, False, f"{type(exc).__name__}: {exc}"))
    return results
