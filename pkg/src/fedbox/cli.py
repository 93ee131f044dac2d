"""Command-line entry points: run, matrix, report, export-data."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from .experiments import (
    EXPERIMENT_IDS,
    ExperimentConfig,
    export_datasets,
    run_experiment,
    run_matrix,
)


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        config = ExperimentConfig.from_json(json.loads(Path(args.config).read_text()))
    else:
        config = ExperimentConfig()
    overrides = {}
    if getattr(args, "experiment", None):
        overrides["experiment_id"] = args.experiment
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "transport", None):
        overrides["transport"] = args.transport
    if getattr(args, "listen", None):
        overrides["listen"] = args.listen
    if getattr(args, "paper_schedule", False):
        # Re-derive both presets from the flag.
        overrides.update(paper_schedule=True, schedule=None, local_epochs=None)
    return replace(config, **overrides) if overrides else config


def _cmd_run(args) -> int:
    config = _load_config(args)
    result = run_experiment(
        config, out_dir=args.out, external_ids=tuple(args.external or ())
    )
    for row in result.summary:
        print(
            f"{row.experiment:>8}  {row.client_id:<10} "
            f"Prec={100 * row.precision:6.2f}  Rec={100 * row.recall:6.2f}  "
            f"F1={100 * row.f1:6.2f}  Round={row.round}"
        )
    if result.best_round is not None:
        print(f"best round (mean recall): {result.best_round}")
    print(f"results written to {args.out}")
    return 0


def _cmd_matrix(args) -> int:
    config = _load_config(args)
    run_matrix(config, out_root=args.out)
    print(f"matrix written to {args.out}")
    _render_dir(Path(args.out))
    return 0


def _cmd_report(args) -> int:
    _render_dir(Path(args.indir))
    return 0


def _render_dir(indir: Path) -> None:
    path = indir / "comparison.csv"
    if not path.exists():
        path = indir / "summary.csv"
    if not path.exists():
        print(f"no summary.csv or comparison.csv under {indir}", file=sys.stderr)
        raise SystemExit(2)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    print(f"\n{path.name}:")
    for idx, row in enumerate(rows):
        print("  " + "  ".join(cell.ljust(width) for cell, width in zip(row, widths)))
        if idx == 0:
            print("  " + "  ".join("-" * width for width in widths))


def _cmd_export_data(args) -> int:
    config = _load_config(args)
    for path in export_datasets(config, args.out):
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedbox",
        description="Desk-scale federated detection experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_experiment=False):
        if with_experiment:
            p.add_argument("--experiment", choices=EXPERIMENT_IDS)
        p.add_argument("--config", help="JSON config file (flags override values)")
        p.add_argument("--seed", type=int)
        p.add_argument("--paper-schedule", action="store_true",
                       help="use the reference epoch schedule and local baselines")

    p_run = sub.add_parser("run", help="run a single experiment")
    common(p_run, with_experiment=True)
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--transport", choices=("inproc", "tcp"))
    p_run.add_argument("--listen", help="host:port for the tcp transport")
    p_run.add_argument("--external", action="append", metavar="CLIENT_ID",
                       help="expect this client to connect over TCP instead of "
                            "spawning it in-process (repeatable)")
    p_run.set_defaults(func=_cmd_run)

    p_matrix = sub.add_parser("matrix", help="run all five experiments")
    common(p_matrix)
    p_matrix.add_argument("--out", required=True, help="output directory")
    p_matrix.set_defaults(func=_cmd_matrix)

    p_report = sub.add_parser("report", help="render a results directory")
    p_report.add_argument("--in", dest="indir", required=True)
    p_report.set_defaults(func=_cmd_report)

    p_export = sub.add_parser("export-data", help="write client datasets to binary files")
    common(p_export)
    p_export.add_argument("--out", required=True, help="output directory")
    p_export.set_defaults(func=_cmd_export_data)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
