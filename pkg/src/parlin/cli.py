"""Command-line entry points.

Logs go to stderr; machine-readable results go to stdout as one JSON object.
Exit codes: 0 ok, 1 usage error, 2 job/worker failure, 3 admission timeout,
4 I/O, schema, or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from . import __version__
from .bench import (
    ExperimentPlan,
    emit_report,
    read_records,
    run_plan_collect,
    summarize,
    write_records,
)
from .cluster import master_run, standalone_run, worker_run
from .config import Config, load_config
from .data import generate_synthetic
from .errors import (
    AdmissionTimeoutError,
    ConfigError,
    DatasetError,
    PlanError,
    ProtocolError,
    WorkerFailureError,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_JOB_FAILURE = 2
EXIT_TIMEOUT = 3
EXIT_IO = 4

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="parlin",
                     description="Data-parallel linear regression over a "
                                 "master/worker cluster, with a strong-scaling "
                                 "benchmark harness.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--seed", type=int, default=None,
                        help="override every seed in the config")
    parser.add_argument("--log-level", choices=sorted(LOG_LEVELS),
                        default=None, help="defaults to $PARLIN_LOG or warn")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-data", help="write a synthetic dataset CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("worker", help="serve one job as a worker node")
    p.add_argument("--master", required=True, metavar="HOST:PORT")
    p.add_argument("--rank", required=True, type=int)
    p.add_argument("--connect-timeout", type=float, default=30.0)

    p = sub.add_parser("master", help="coordinate a cluster job")
    p.add_argument("--config", required=True)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--expected-workers", type=int, default=None)

    p = sub.add_parser("run", help="run the job standalone (no network)")
    p.add_argument("--config", required=True)

    p = sub.add_parser("bench", help="run the scaling experiment plan")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="report directory "
                                               "(default: bench.output_dir)")
    p.add_argument("--train-mode", choices=["gradient_descent", "normal_equations"],
                   default="gradient_descent",
                   help="bench jobs default to gradient descent so per-worker "
                        "compute dominates")

    p = sub.add_parser("report", help="re-render reports from stored records")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    return parser


def _setup_logging(level_flag: str | None) -> None:
    name = level_flag or os.environ.get("PARLIN_LOG", "warn").lower()
    level = LOG_LEVELS.get(name, logging.WARNING)
    logging.basicConfig(stream=sys.stderr, level=level,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _load(args) -> Config:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    return config


def _emit(obj: dict) -> None:
    print(json.dumps(obj))


def cmd_gen_data(args) -> int:
    config = _load(args)
    if config.dataset.spec is None:
        raise ConfigError("gen-data needs a dataset.spec section",
                          key="dataset.spec")
    summary = generate_synthetic(config.dataset.spec, args.out)
    _emit(summary.to_json_obj())
    return EXIT_OK


def cmd_worker(args) -> int:
    status = worker_run(args.master, args.rank,
                        connect_timeout_s=args.connect_timeout)
    return EXIT_OK if status == 0 else EXIT_JOB_FAILURE


def cmd_master(args) -> int:
    config = _load(args)
    workers = (args.expected_workers if args.expected_workers is not None
               else config.cluster.expected_workers)
    job = config.job_spec(expected_workers=workers)
    port = args.port if args.port is not None else config.cluster.port
    result = master_run(job, port,
                        admission_timeout_s=config.cluster.admission_timeout_s)
    _emit(result.to_json_obj())
    return EXIT_OK


def cmd_run(args) -> int:
    config = _load(args)
    result = standalone_run(config.job_spec(expected_workers=0))
    _emit(result.to_json_obj())
    return EXIT_OK


def cmd_bench(args) -> int:
    config = _load(args)
    out_dir = args.out if args.out is not None else config.bench.output_dir
    if out_dir is None:
        raise ConfigError("bench needs an output directory (--out or "
                          "bench.output_dir)", key="bench.output_dir")
    train = dataclasses.replace(config.train, mode=args.train_mode)
    plan = ExperimentPlan(
        job=dataclasses.replace(config.job_spec(expected_workers=0),
                                train_config=train),
        environments=config.bench.environments,
        repetitions=config.bench.repetitions,
        port=config.cluster.port,
        admission_timeout_s=config.cluster.admission_timeout_s,
    )
    records, _results = run_plan_collect(plan)
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records_path = out / "records.json"
    write_records(records, records_path)
    paths = emit_report(summarize(records), out)
    _emit({"records": str(records_path),
           **{k: str(v) for k, v in paths.items()}})
    return EXIT_OK


def cmd_report(args) -> int:
    records = read_records(args.records)
    paths = emit_report(summarize(records), args.out)
    _emit({k: str(v) for k, v in paths.items()})
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "worker": cmd_worker,
    "master": cmd_master,
    "run": cmd_run,
    "bench": cmd_bench,
    "report": cmd_report,
}


def cli_dispatch(argv) -> int:
    """Parse arguments, run the subcommand, and map errors to exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"parlin: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    _setup_logging(args.log_level)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"parlin: config error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DatasetError, OSError) as exc:
        print(f"parlin: dataset error: {exc}", file=sys.stderr)
        return EXIT_IO
    except AdmissionTimeoutError as exc:
        print(f"parlin: admission timeout: {exc}", file=sys.stderr)
        return EXIT_TIMEOUT
    except WorkerFailureError as exc:
        print(f"parlin: job failed: {exc}", file=sys.stderr)
        return EXIT_JOB_FAILURE
    except PlanError as exc:
        print(f"parlin: bench plan failed: {exc}", file=sys.stderr)
        return exc.exit_code
    except ProtocolError as exc:
        print(f"parlin: protocol error: {exc}", file=sys.stderr)
        return EXIT_JOB_FAILURE
    except ValueError as exc:
        print(f"parlin: invalid parameters: {exc}", file=sys.stderr)
        return EXIT_IO


def main(argv=None) -> int:
    return cli_dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
