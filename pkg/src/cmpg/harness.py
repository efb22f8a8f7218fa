"""Experiment configuration, repeated runs and CSV metrics.

A config file is YAML::

    env: pollution_tax
    env_params: {m: 2}
    seed: 0
    repetitions: 10
    preset: practical          # practical | theory | none
    iprox: {nu: 0.005}         # overrides on top of the preset
    output_dir: runs/fig2

Repetition ``r`` runs with seed ``seed + r``.  Outputs per experiment are
``rep_XX.csv`` (one per repetition), ``aggregate.csv`` and ``meta.json``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .environments import ENVIRONMENTS, PotentialSpec, build_environment
from .equilibrium import verify_mpg
from .game import GameSpec
from .iprox import IProxConfig, RunRecord, default_config, initial_policy, practical_config, resolve_potential, run

OUTPUT_ENV = "CMPG_OUTPUT_DIR"
THREADS_ENV = "CMPG_THREADS"

METRIC_COLUMNS = ["t", "potential", "potential_scaled", "constraint", "nash_gap", "branch_cost_frac", "wall_s", "seed"]
AGGREGATE_EXTRA = ["potential_mean", "potential_std", "constraint_mean", "constraint_std"]

PRESETS = ("practical", "theory", "none")
TOP_KEYS = {
    "env", "env_params", "seed", "repetitions", "preset", "eps", "mode", "iprox", "eval_every", "eval_gap",
    "output_dir", "record_wall_time", "checkpoint_every", "verify_trials",
}
REQUIRED_KEYS = ("env", "seed")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    env: str
    seed: int
    env_params: dict = field(default_factory=dict)
    repetitions: int = 1
    preset: str = "practical"
    eps: float | None = None
    mode: str = "stochastic"
    iprox: dict = field(default_factory=dict)
    eval_every: int = 1
    eval_gap: bool = False
    output_dir: str = "runs"
    record_wall_time: bool = False
    checkpoint_every: int = 0
    verify_trials: int = 20

    def __post_init__(self):
        if self.env not in ENVIRONMENTS:
            raise ConfigError(f"env: unknown environment {self.env!r}; choose from {sorted(ENVIRONMENTS)}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed: must be an integer")
        if self.repetitions < 1:
            raise ConfigError("repetitions: must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every: must be >= 1")
        if self.preset not in PRESETS:
            raise ConfigError(f"preset: must be one of {PRESETS}")
        if self.preset == "theory" and (self.eps is None or self.eps <= 0):
            raise ConfigError("eps: the theory preset needs a positive eps")
        params_cls = ENVIRONMENTS[self.env][0]
        known = {f.name for f in dataclasses.fields(params_cls)}
        unknown = sorted(set(self.env_params) - known)
        if unknown:
            raise ConfigError(f"env_params: unknown keys {unknown}; allowed {sorted(known)}")
        known_iprox = {f.name for f in dataclasses.fields(IProxConfig)} - {"seed", "env"}
        unknown = sorted(set(self.iprox) - known_iprox)
        if unknown:
            raise ConfigError(f"iprox: unknown keys {unknown}; allowed {sorted(known_iprox)}")

    # ------------------------------------------------------------------

    def build(self) -> tuple[GameSpec, PotentialSpec]:
        return build_environment(self.env, **self.env_params)

    def twin(self) -> tuple[GameSpec, PotentialSpec]:
        """Random-stopping version of the environment, used for exact diagnostics."""
        params_cls = ENVIRONMENTS[self.env][0]
        if "horizon" not in {f.name for f in dataclasses.fields(params_cls)}:
            return self.build()
        return build_environment(self.env, **{**self.env_params, "horizon": None})

    def iprox_config(self, spec: GameSpec, seed: int) -> IProxConfig:
        overrides = dict(self.iprox)
        if self.preset == "practical":
            m = self.env_params.get("m", ENVIRONMENTS[self.env][0]().m)
            return practical_config(self.env, m, seed=seed, **overrides)
        if self.preset == "theory":
            return default_config(spec, self.eps, mode=self.mode, seed=seed, **overrides)
        try:
            return IProxConfig(seed=seed, env=self.env, mode=self.mode, **overrides)
        except TypeError as exc:
            raise ConfigError(f"iprox: {exc}") from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Hash of everything that affects results (the output directory does not)."""
        data = self.to_dict()
        data.pop("output_dir")
        blob = json.dumps(data, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def config_from_dict(data: Any, source: str = "<config>") -> ExperimentConfig:
    if data is None:
        raise ConfigError(f"{source}: empty config; required keys: {list(REQUIRED_KEYS)}")
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    missing = [k for k in REQUIRED_KEYS if k not in data]
    if missing:
        raise ConfigError(f"{source}: missing required keys {missing}; required keys: {list(REQUIRED_KEYS)}")
    unknown = sorted(set(data) - TOP_KEYS)
    if unknown:
        raise ConfigError(f"{source}: unknown keys {unknown}")
    for key in ("env_params", "iprox"):
        if key in data and not isinstance(data[key] or {}, dict):
            raise ConfigError(f"{source}: {key} must be a mapping")
    kwargs = {k: v for k, v in data.items()}
    kwargs["env_params"] = dict(data.get("env_params") or {})
    kwargs["iprox"] = dict(data.get("iprox") or {})
    try:
        return ExperimentConfig(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def parse_config(path) -> ExperimentConfig:
    """Read and validate a YAML experiment config."""
    path = Path(path)
    text = path.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError(f"{path}: YAML parse error at {where}: {exc.problem}") from None
    return config_from_dict(data, str(path))


def write_config(config: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=True)


# --------------------------------------------------------------------------
# metrics


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return "nan"
    return f"{value:.12g}"


def scaled(values) -> list[float]:
    """Min-max scaling of one trace to [0, 1]; a constant trace maps to 0."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return []
    lo, hi = arr.min(), arr.max()
    if hi - lo <= 0:
        return [0.0] * arr.size
    return list((arr - lo) / (hi - lo))


def metric_rows(records: list[RunRecord], record_wall_time: bool = True) -> list[dict]:
    pot_scaled = scaled([r.potential for r in records])
    rows = []
    for rec, ps in zip(records, pot_scaled):
        rows.append(
            {
                "t": rec.t,
                "potential": rec.potential,
                "potential_scaled": ps,
                "constraint": rec.constraint,
                "nash_gap": rec.nash_gap,
                "branch_cost_frac": rec.branch_cost_frac,
                "wall_s": rec.wall_s if record_wall_time else None,
                "seed": rec.seed,
            }
        )
    return rows


def _write_rows(rows: list[dict], columns: list[str], path) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(c)) for c in columns))
    Path(path).write_text("\n".join(lines) + "\n")


def write_metrics(records: list[RunRecord], path, record_wall_time: bool = True) -> None:
    """Per-run CSV with the fixed metric header and 12 significant digits."""
    _write_rows(metric_rows(records, record_wall_time), METRIC_COLUMNS, path)


def read_metrics(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    out = []
    for line in lines[1:]:
        cells = line.split(",")
        row = {}
        for name, cell in zip(header, cells):
            row[name] = None if cell == "" else float(cell)
        out.append(row)
    return out


def _std(x: np.ndarray) -> float:
    return float(x.std(ddof=1)) if x.size > 1 else 0.0


def aggregate_rows(per_rep: list[list[dict]]) -> list[dict]:
    """Mean over repetitions per iteration; ``*_std`` columns use the sample standard deviation."""
    if not per_rep:
        return []
    length = min(len(r) for r in per_rep)
    rows = []
    for idx in range(length):
        cells = [rep[idx] for rep in per_rep]
        row = {"t": cells[0]["t"], "seed": None}
        for col in ("potential", "potential_scaled", "constraint", "nash_gap", "branch_cost_frac", "wall_s"):
            vals = [c[col] for c in cells]
            row[col] = None if any(v is None for v in vals) else float(np.mean(vals))
        pot = np.array([c["potential"] for c in cells], dtype=float)
        con = np.array([c["constraint"] for c in cells], dtype=float)
        row.update(potential_mean=float(pot.mean()), potential_std=_std(pot), constraint_mean=float(con.mean()), constraint_std=_std(con))
        rows.append(row)
    return rows


def write_aggregate(per_rep: list[list[dict]], path) -> None:
    _write_rows(aggregate_rows(per_rep), METRIC_COLUMNS + AGGREGATE_EXTRA, path)


# --------------------------------------------------------------------------
# experiments


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    output_dir: Path
    records: dict[int, list[RunRecord]]
    failures: dict[int, str]
    potential_label: str
    potential_status: str

    @property
    def ok(self) -> bool:
        return not self.failures

    def aggregate(self) -> list[dict]:
        return aggregate_rows([read_metrics(self.output_dir / f"rep_{r:02d}.csv") for r in sorted(self.records)])


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "1"))
    return max(1, int(threads))


def resolve_output_dir(config: ExperimentConfig, output_dir=None) -> Path:
    return Path(output_dir or os.environ.get(OUTPUT_ENV) or config.output_dir)


def experiment_potential(config: ExperimentConfig) -> PotentialSpec:
    """Builder potential, verified on the random-stopping twin; falls back when falsified."""
    spec, potential = config.build()
    if potential.status == "unchecked":
        twin, twin_potential = config.twin()
        checked = verify_mpg(twin, twin_potential, trials=config.verify_trials)
        potential = PotentialSpec(potential.table, checked.status, checked.max_deviation, potential.label)
    return resolve_potential(spec, potential)


def run_repetition(config: ExperimentConfig, rep: int, potential: PotentialSpec, out: Path | None = None) -> list[RunRecord]:
    spec, _ = config.build()
    seed = config.seed + rep
    iprox = config.iprox_config(spec, seed)
    gap_spec = config.twin()[0] if config.eval_gap else None
    ckpt = None
    if out is not None and config.checkpoint_every > 0:
        ckpt = out / f"policy_rep{rep:02d}.json"
    result = run(
        spec,
        initial_policy(spec, iprox.xi),
        iprox,
        potential,
        eval_gap=config.eval_gap,
        eval_every=config.eval_every,
        checkpoint_path=ckpt,
        checkpoint_every=config.checkpoint_every,
        gap_spec=gap_spec,
        config_hash=config.digest(),
    )
    return result.records


def run_experiment(config: ExperimentConfig, output_dir=None, threads: int | None = None) -> ExperimentResult:
    """Run every repetition, write per-repetition and aggregate CSVs plus ``meta.json``.

    Failed repetitions are recorded and skipped; the result's ``ok`` flag is
    then false.  Results do not depend on ``threads``.
    """
    out = resolve_output_dir(config, output_dir)
    out.mkdir(parents=True, exist_ok=True)
    potential = experiment_potential(config)
    started = time.perf_counter()

    def job(rep):
        try:
            return rep, run_repetition(config, rep, potential, out), None
        except Exception as exc:  # recorded, the other repetitions continue
            return rep, None, f"{type(exc).__name__}: {exc}"

    n_threads = resolve_threads(threads)
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            outcomes = list(pool.map(job, range(config.repetitions)))
    else:
        outcomes = [job(r) for r in range(config.repetitions)]

    records, failures = {}, {}
    for rep, recs, err in sorted(outcomes, key=lambda o: o[0]):
        if err is not None:
            failures[rep] = err
            continue
        records[rep] = recs
        write_metrics(recs, out / f"rep_{rep:02d}.csv", config.record_wall_time)
        if not config.record_wall_time:
            _write_rows(
                [{"t": r.t, "wall_s": r.wall_s} for r in recs], ["t", "wall_s"], out / f"timing_rep{rep:02d}.csv"
            )
    result = ExperimentResult(config, out, records, failures, potential.label, potential.status)
    # the summary is computed from the files as written so it can be recomputed exactly
    write_aggregate([read_metrics(out / f"rep_{r:02d}.csv") for r in sorted(records)], out / "aggregate.csv")
    meta = {
        "config": config.to_dict(),
        "config_hash": config.digest(),
        "potential_label": potential.label,
        "potential_status": potential.status,
        "failures": {str(k): v for k, v in failures.items()},
        "total_wall_s": time.perf_counter() - started,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")
    return result


def apply_override(data: dict, key: str, value) -> dict:
    """Set a dotted key (``iprox.nu``, ``env_params.m``, ``seed``) on a config dict copy."""
    data = json.loads(json.dumps(data, default=str))
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key}: {part} is not a mapping")
    node[parts[-1]] = value
    return data


def parse_value(text: str):
    """Interpret a command-line value as YAML scalar (numbers, booleans, null, strings)."""
    return yaml.safe_load(text)


__all__ = [
    "AGGREGATE_EXTRA",
    "METRIC_COLUMNS",
    "ConfigError",
    "ExperimentConfig",
    "ExperimentResult",
    "aggregate_rows",
    "apply_override",
    "config_from_dict",
    "parse_config",
    "read_metrics",
    "run_experiment",
    "write_aggregate",
    "write_config",
    "write_metrics",
]
