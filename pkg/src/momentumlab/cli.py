"""Command-line entry point.

One subcommand per scenario plus `verify-suite`.  Exit codes: 0 on full
success, 2 when some grid cells failed (the sweep still completes), 1 on
configuration errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import experiments, verify
from .datasets import SparseRegressionSpec, gen_sparse_regression


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="momentumlab",
        description="Momentum descent/flow experiments on quadratics, diagonal nets and small networks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for scenario in experiments.SCENARIOS:
        p = sub.add_parser(scenario, help=f"run the {scenario} scenario")
        _common_flags(p)
    p = sub.add_parser("verify-suite", help="run the cross-cutting verification checks")
    _common_flags(p)
    return parser


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="JSON file with config overrides")
    p.add_argument("--out", type=str, default=None, help="output directory")
    p.add_argument("--workers", type=int, default=None, help="parallel grid workers")
    p.add_argument("--seed", type=int, default=None, help="base seed (shifts the whole seed list)")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")


def _overrides_from(args) -> dict:
    overrides = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ValueError(f"config file not found: {path}")
        overrides.update(json.loads(path.read_text()))
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.no_figures:
        overrides["render_figures"] = False
    return overrides


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    try:
        overrides = _overrides_from(args)
        if args.command == "verify-suite":
            return _run_verify(args, overrides)
        cfg = experiments.load_config(args.command, overrides)
        if args.seed is not None:
            cfg = replace(cfg, seeds=tuple(args.seed + i for i in range(len(cfg.seeds))))
    except (ValueError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    result = experiments.run_scenario(cfg)
    n_rows = len(result["rows"])
    print(f"{args.command}: {n_rows} result rows, {result['failures']} failed cells -> {result['out_dir']}")
    return 2 if result["failures"] else 0


def _run_verify(args, overrides: dict) -> int:
    out_dir = Path(overrides.get("out_dir", "results")) / "verify_suite"
    seed = args.seed if args.seed is not None else 0
    dataset = gen_sparse_regression(SparseRegressionSpec(seed=seed))
    reports = verify.verify_suite(dataset)
    out_dir.mkdir(parents=True, exist_ok=True)
    verify.reports_to_csv(reports, out_dir / "checks.csv")
    failed = [r for r in reports if r.status != "pass"]
    for r in reports:
        print(f"{r.status.upper():4s}  {r.name}: measured={r.measured:.3e} threshold={r.threshold:.3e}")
    print(f"verify-suite: {len(reports) - len(failed)}/{len(reports)} checks passed -> {out_dir}")
    return 0 if not failed else 2


if __name__ == "__main__":
    raise SystemExit(main())
