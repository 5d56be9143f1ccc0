"""Command line entry point: ``lpci run|generate|fetch-covid|report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from lpci.errors import LpciError
from lpci.experiment import (
    ExperimentConfig,
    SyntheticSpec,
    StageError,
    fetch_covid,
    generate_synthetic,
    reaggregate,
    run_experiment,
)

log = logging.getLogger("lpci")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lpci", description="Conformal intervals for panel data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a JSON config")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--seed", type=int, action="append", help="override seeds (repeatable)")
    run.add_argument("--out", type=Path, help="override output directory")
    run.add_argument("--method", action="append", help="override methods (repeatable)")
    run.add_argument("--jobs", type=int, help="parallel worker processes")

    gen = sub.add_parser("generate", help="write a synthetic panel to CSV")
    gen.add_argument("--spec", required=True, type=Path, help="JSON synthetic spec")
    gen.add_argument("--out", required=True, type=Path)

    fetch = sub.add_parser("fetch-covid", help="download and cache the covid panel")
    fetch.add_argument("--cache", type=Path, help="cache directory")
    fetch.add_argument("--out", type=Path, help="also write the normalized panel as CSV")

    rep = sub.add_parser("report", help="re-aggregate per-seed reports in a results directory")
    rep.add_argument("--in", dest="input", required=True, type=Path)
    return p


def _cmd_run(args) -> int:
    config = ExperimentConfig.load(args.config)
    changes = {}
    if args.seed:
        changes["seeds"] = tuple(args.seed)
    if args.method:
        changes["methods"] = tuple(args.method)
    if args.out:
        changes["output_dir"] = str(args.out)
    if args.jobs:
        changes["jobs"] = args.jobs
    if changes:
        config = ExperimentConfig.from_dict({**config.to_dict(), **changes})
    result = run_experiment(config)
    print(result["table"])
    return 0


def _cmd_generate(args) -> int:
    spec = SyntheticSpec.from_dict(json.loads(args.spec.read_text()))
    generate_synthetic(spec).to_frame().to_csv(args.out, index=False)
    return 0


def _cmd_fetch(args) -> int:
    panel = fetch_covid(args.cache)
    print(f"{panel.n_groups} groups x {panel.n_times} days")
    if args.out:
        panel.to_frame().to_csv(args.out, index=False)
    return 0


def _cmd_report(args) -> int:
    print(reaggregate(args.input)["table"])
    return 0


COMMANDS = {"run": _cmd_run, "generate": _cmd_generate, "fetch-covid": _cmd_fetch, "report": _cmd_report}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (LpciError, OSError, ValueError) as exc:
        print(f"error: [{args.command}] {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
