"""Command line entry point: ``agent-gpa <verb> [options]``.

Exit codes: 0 success, 1 other harness error, 2 validation failure,
3 backend retries exhausted, 4 replay fixture is missing a response.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Sequence

from pydantic import ValidationError

from . import harness
from .config import load_config
from .errors import (
    BackendExhausted,
    CacheMissInReplayMode,
    DatasetMismatch,
    GpaError,
    ValidationFailure,
)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="harness config (JSON)")
    p.add_argument("--dataset", metavar="PATH", help="dataset directory or dataset.json")
    p.add_argument("--split", choices=("dev", "test", "all"), default="all")
    p.add_argument("--judges", metavar="LIST", help="comma-separated judge ids, e.g. LC,EE,TC")
    p.add_argument("--runs", type=int, metavar="N", help="independent runs per (trace, judge)")
    p.add_argument("--backend", choices=("live", "replay", "mock"), default="mock")
    p.add_argument("--matching", choices=("auto", "adjudicated"), default="auto")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agent-gpa", description="Goal-Plan-Action judge harness for agent traces.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("ingest", help="validate traces and annotations, write a dataset index")
    _common(p)
    p.add_argument("--traces", required=True, metavar="DIR", help="directory of trace JSON files")
    p.add_argument("--annotations", required=True, metavar="PATH", help="annotated errors (JSON Lines)")
    p.add_argument("--mapping", required=True, metavar="PATH", help="error -> judge mapping (JSON Lines)")
    p.add_argument("--human-scores", metavar="PATH", help="human trace scores (JSON Lines)")

    p = sub.add_parser("split", help="seeded dev/test split of an ingested dataset")
    _common(p)
    p.add_argument("--ratio", type=float, default=0.5, help="dev fraction (default 0.5)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--membership", metavar="PATH", help='explicit {"dev": [...], "test": [...]} lists')

    p = sub.add_parser("evaluate", help="run judges over the traces of a split")
    _common(p)
    p.add_argument("--run-id", help="run directory name (default: digest of the manifest)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-transcripts", metavar="DIR", help="also write rendered transcripts here")

    p = sub.add_parser("report", help="match verdicts to annotations, write report.json and report.md")
    _common(p)
    p.add_argument("--run", required=True, metavar="DIR", help="run directory")
    p.add_argument("--adjudication", metavar="PATH", help="human match decisions (JSON Lines)")
    p.add_argument("--write-skeleton", metavar="PATH", help="write an adjudication file pre-filled from AUTO matches")
    p.add_argument("--unit", choices=("trace_judge", "error_judge"), default="trace_judge")
    p.add_argument("--run-index", type=int, default=0, help="which run feeds coverage and classification")

    p = sub.add_parser("consistency", help="reliability of judge scores across runs")
    _common(p)
    p.add_argument("--run", action="append", required=True, metavar="DIR", help="run directory (repeatable)")

    p = sub.add_parser("compare", help="coverage deltas between two reports")
    _common(p)
    p.add_argument("bundle_a", help="report.json or run directory")
    p.add_argument("bundle_b", help="report.json or run directory (baseline)")
    return parser


def _judges(value: str | None) -> list[str] | None:
    if not value:
        return None
    return [j.strip() for j in value.split(",") if j.strip()]


def run(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    if args.verb == "ingest":
        harness.cmd_ingest(args.traces, args.annotations, args.mapping, args.out or args.dataset or ".", args.human_scores)
        return harness.EXIT_OK
    if args.verb == "split":
        harness.cmd_split(args.dataset or ".", args.ratio, args.seed, args.membership)
        return harness.EXIT_OK
    if args.verb == "evaluate":
        result = harness.cmd_evaluate(
            args.dataset or ".",
            config,
            args.out or "runs",
            judges=_judges(args.judges),
            split=args.split,
            n_runs=args.runs or 1,
            backend_mode=args.backend,
            run_id=args.run_id,
            seed=args.seed,
            dump_transcripts=args.dump_transcripts,
        )
        return result.exit_code
    if args.verb == "report":
        harness.cmd_report(
            args.run,
            config,
            dataset=args.dataset,
            matching=args.matching,
            adjudication=args.adjudication,
            unit=args.unit,
            run_index=args.run_index,
            out=args.out,
            skeleton=args.write_skeleton,
        )
        return harness.EXIT_OK
    if args.verb == "consistency":
        harness.cmd_consistency(args.run, config, dataset=args.dataset, judges=_judges(args.judges), out=args.out)
        return harness.EXIT_OK
    if args.verb == "compare":
        harness.cmd_compare(args.bundle_a, args.bundle_b, out=args.out)
        return harness.EXIT_OK
    raise AssertionError(args.verb)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except (ValidationFailure, ValidationError, DatasetMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return harness.EXIT_VALIDATION
    except CacheMissInReplayMode as exc:
        print(f"error: {exc}", file=sys.stderr)
        return harness.EXIT_REPLAY_GAP
    except BackendExhausted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return harness.EXIT_BACKEND_EXHAUSTED
    except (GpaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return harness.EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
