"""``ppg-uq`` command line: generate | train | evaluate | report | sweep.

Exit codes: 0 success, 1 completed with warnings, 2 configuration error,
3 numeric failure (NaN/inf during training), 4 schema or I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields

from ..checkpoint import CheckpointError
from ..train import NonFiniteLossError
from .artifacts import SchemaError
from .commands import cmd_evaluate, cmd_generate, cmd_report, cmd_sweep, cmd_train
from .config import ConfigError, RunConfig, load_config

__all__ = ["main", "build_parser", "RunConfig", "ConfigError", "SchemaError",
           "cmd_generate", "cmd_train", "cmd_evaluate", "cmd_report", "cmd_sweep"]

EXIT_OK, EXIT_WARN, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4
log = logging.getLogger("ppg_uq")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' config file; flags below override it")
    g = p.add_argument_group("config overrides")
    for f in fields(RunConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}", metavar="V", default=None)


def _config_from(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppg-uq", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write synthetic train/val/test splits and a manifest")
    _add_config_flags(p)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = sub.add_parser("train", parents=[common], help="train a model and write a run directory")
    _add_config_flags(p)

    p = sub.add_parser("evaluate", parents=[common], help="write per-example predictions for one split")
    p.add_argument("run_dir")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--data", help="dataset manifest (defaults to the one recorded in the run)")

    p = sub.add_parser("report", parents=[common], help="calibration reports and a summary from a predictions file")
    p.add_argument("predictions")
    p.add_argument("--metrics", help="comma list: ece,uce,pearson,perf (af) or ence,coverage,bivar,pearson,perf (bp)")
    p.add_argument("--out", help="report directory (default: next to the predictions file)")

    p = sub.add_parser("sweep", parents=[common], help="train/evaluate/report across dropout rates or h0 values")
    _add_config_flags(p)
    p.add_argument("--axis", required=True, choices=("dropout", "h0"))
    p.add_argument("--values", required=True, help="comma-separated values, e.g. 0.01,0.05,0.4")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    return parser


def _run(args) -> int:
    if args.command == "generate":
        print(cmd_generate(_config_from(args), force=args.force))
        return EXIT_OK
    if args.command == "train":
        print(cmd_train(_config_from(args)))
        return EXIT_OK
    if args.command == "evaluate":
        print(cmd_evaluate(args.run_dir, args.split, args.data))
        return EXIT_OK
    if args.command == "report":
        metrics = [m.strip() for m in args.metrics.split(",") if m.strip()] if args.metrics else None
        path, warnings = cmd_report(args.predictions, metrics, args.out)
        print(path)
        return EXIT_WARN if warnings else EXIT_OK
    if args.command == "sweep":
        try:
            values = [float(v) for v in args.values.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"--values: {exc}") from None
        path, failures = cmd_sweep(_config_from(args), args.axis, values, args.split)
        print(path)
        return EXIT_WARN if failures else EXIT_OK
    raise ConfigError(f"unknown command {args.command!r}")  # pragma: no cover


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc}\n{json.dumps(exc.diagnostics, indent=2)}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SchemaError, CheckpointError, OSError) as exc:
        print(f"schema/io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
