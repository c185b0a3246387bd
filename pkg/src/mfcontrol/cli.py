"""Command-line entry point: ``mfcontrol run | catalogue | version``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .analysis import CHECK_NAMES
from .fields import COST_CATALOGUE, FIELD_CATALOGUE
from .scenarios import BUILTIN_SCENARIOS, ScenarioError, load_scenario


def list_catalogue() -> str:
    """Deterministic listing of fields, costs, checks and built-in scenarios."""
    from .runner import CHECK_ORDER

    lines = ["fields:"]
    lines += [f"  {n}" for n in sorted(FIELD_CATALOGUE)]
    lines.append("costs:")
    lines += [f"  {n}" for n in sorted(COST_CATALOGUE)]
    lines.append("analysis checks:")
    lines += [f"  {n}" for n in CHECK_NAMES]
    lines.append("scenario checks:")
    lines += [f"  {n}" for n in CHECK_ORDER]
    lines.append("scenarios:")
    lines += [f"  {n}" for n in sorted(BUILTIN_SCENARIOS)]
    return "\n".join(lines) + "\n"


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfcontrol", description="Mean-field optimal control experiments.")
    sub = p.add_subparsers(dest="verb", required=True)
    run = sub.add_parser("run", help="run a scenario file")
    run.add_argument("file")
    run.add_argument("--out", help="output directory (default: scenario output_dir or ./out/<name>)")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--threads", type=int, default=1)
    run.add_argument("--strict", action="store_true", help="treat warnings as failures")
    sub.add_parser("catalogue", help="list built-in fields, costs and checks")
    sub.add_parser("version", help="print the version")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.verb == "version":
        print(__version__)
        return 0
    if args.verb == "catalogue":
        sys.stdout.write(list_catalogue())
        return 0
    from .runner import run_scenario

    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must fit in an unsigned 64-bit integer", file=sys.stderr)
        return 2
    try:
        sc = load_scenario(args.file)
    except (ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out or sc.output_dir or Path("out") / sc.name)
    try:
        summary = run_scenario(sc, out, seed=args.seed, threads=args.threads, strict=args.strict)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for rec in summary["checks"]:
        print(f"{'PASS' if rec['passed'] else 'FAIL'}  {rec['name']}")
    print(f"summary: {out / 'summary.json'}")
    return 0 if summary["all_passed"] else 1


if __name__ == "__main__":
    raise SystemExit(main())
