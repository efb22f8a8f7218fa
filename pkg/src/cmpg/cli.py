"""Command line entry point: ``cmpg run|eval|sweep|check``."""

from __future__ import annotations

import argparse
import itertools
import json
import sys

from .harness import (
    ConfigError,
    apply_override,
    config_from_dict,
    parse_config,
    parse_value,
    resolve_output_dir,
    run_experiment,
)


def _cmd_run(args) -> int:
    config = parse_config(args.config)
    result = run_experiment(config, output_dir=args.output, threads=args.threads)
    print(f"wrote {len(result.records)} repetition(s) to {result.output_dir} (potential: {result.potential_label})")
    for rep, err in sorted(result.failures.items()):
        print(f"repetition {rep} failed: {err}", file=sys.stderr)
    return 0 if result.ok else 1


def _cmd_eval(args) -> int:
    from .equilibrium import nash_gap
    from .game import load_policy

    config = parse_config(args.config)
    spec, _ = config.twin()
    policy = load_policy(args.policy)
    report = nash_gap(spec, policy)
    print(json.dumps(report.row(), indent=2, default=str))
    return 0


def _parse_params(items: list[str]) -> list[tuple[str, list]]:
    grid = []
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--param expects key=v1,v2,...; got {item!r}")
        key, values = item.split("=", 1)
        grid.append((key.strip(), [parse_value(v) for v in values.split(",")]))
    return grid


def _cmd_sweep(args) -> int:
    import yaml

    with open(args.config) as fh:
        base = yaml.safe_load(fh)
    config_from_dict(base, args.config)  # validate the base first
    grid = _parse_params(args.param)
    root = resolve_output_dir(config_from_dict(base, args.config), args.output)
    status = 0
    keys = [k for k, _ in grid]
    for idx, combo in enumerate(itertools.product(*[vals for _, vals in grid])):
        data = base
        for key, value in zip(keys, combo):
            data = apply_override(data, key, value)
        config = config_from_dict(data, f"{args.config} [{dict(zip(keys, combo))}]")
        out = root / f"sweep_{idx:03d}"
        result = run_experiment(config, output_dir=out, threads=args.threads)
        print(f"{out}: {dict(zip(keys, combo))} -> {'ok' if result.ok else 'failed'}")
        if not result.ok:
            status = 1
    return status


def _cmd_check(args) -> int:
    from .checks import run_checks

    results = run_checks()
    for res in results:
        print(res.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmpg", description="Independent proximal-point learning in constrained Markov potential games")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("config")
    p.add_argument("--output", help="output directory (overrides the config and CMPG_OUTPUT_DIR)")
    p.add_argument("--threads", type=int, help="worker threads for repetitions (default CMPG_THREADS or 1)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("eval", help="Nash-gap report for a saved policy")
    p.add_argument("config")
    p.add_argument("policy")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="run a config over a parameter grid")
    p.add_argument("config")
    p.add_argument("--param", action="append", default=[], help="dotted key and values, e.g. iprox.nu=0.001,0.002")
    p.add_argument("--output")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("check", help="run the structural invariant suite")
    p.set_defaults(func=_cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
