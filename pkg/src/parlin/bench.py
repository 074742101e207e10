"""Strong-scaling benchmark harness: run environments, summarize, report.

Every "node" is a local OS process (the original experiment used equal-spec
VMs on one host). Spawned processes get their BLAS thread pools pinned to 1
so the measured scaling reflects process parallelism, not library threading.
Timings are the per-job wall seconds measured inside the job itself, i.e.
from worker admission to result; spawn and admission cost is excluded.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import subprocess
import sys
import tempfile
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

from .cluster import DEFAULT_PORT, JobResult, JobSpec
from .errors import DatasetError, PlanError

__all__ = [
    "Environment",
    "ExperimentPlan",
    "TimingRecord",
    "EnvironmentSummary",
    "SummaryTable",
    "STANDARD_ENVIRONMENTS",
    "TIMING_WINDOW_NOTE",
    "run_plan",
    "run_plan_collect",
    "summarize",
    "percent_reduction",
    "round_half_up",
    "emit_report",
    "read_summary_csv",
    "write_records",
    "read_records",
]

log = logging.getLogger(__name__)

STANDALONE_LABEL = "Standalone"

TIMING_WINDOW_NOTE = (
    "wall_seconds spans worker admission to result (load + train + evaluate); "
    "process spawn and admission are excluded"
)

# Pin numeric libraries to one thread in spawned nodes so speedup comes from
# the processes we are measuring.
_SINGLE_THREAD_ENV = {
    "OMP_NUM_THREADS": "1",
    "OPENBLAS_NUM_THREADS": "1",
    "MKL_NUM_THREADS": "1",
    "NUMEXPR_NUM_THREADS": "1",
    "VECLIB_MAXIMUM_THREADS": "1",
}


@dataclass(frozen=True)
class Environment:
    """One measured setup: a label and how many workers it runs."""

    label: str
    worker_count: int

    def __post_init__(self):
        if self.worker_count < 0:
            raise ValueError("worker_count must be >= 0")
        is_standalone = self.label.startswith(STANDALONE_LABEL)
        if (self.worker_count == 0) != is_standalone:
            raise ValueError(
                f"environment {self.label!r}: worker_count 0 is reserved for "
                f"the standalone environment")


STANDARD_ENVIRONMENTS = (
    Environment(STANDALONE_LABEL, 0),
    Environment("Cluster_1", 1),
    Environment("Cluster_2", 2),
    Environment("Cluster_3", 3),
    Environment("Cluster_4", 4),
)


@dataclass(frozen=True)
class ExperimentPlan:
    """Which environments to run, how many repetitions, and the job template."""

    job: JobSpec
    environments: tuple[Environment, ...] = STANDARD_ENVIRONMENTS
    repetitions: int = 5
    port: int = DEFAULT_PORT
    admission_timeout_s: float = 60.0
    run_timeout_s: float = 900.0

    def __post_init__(self):
        object.__setattr__(self, "environments", tuple(self.environments))
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if not self.environments:
            raise ValueError("plan needs at least one environment")
        labels = [e.label for e in self.environments]
        if len(set(labels)) != len(labels):
            raise ValueError("environment labels must be unique")


@dataclass(frozen=True)
class TimingRecord:
    """One wall-clock measurement: environment, 1-based run index, seconds."""

    environment_label: str
    run_index: int
    wall_seconds: float

    def __post_init__(self):
        if self.run_index < 1:
            raise ValueError("run_index is 1-based")
        if not self.wall_seconds > 0:
            raise ValueError("wall_seconds must be > 0")


@dataclass(frozen=True)
class EnvironmentSummary:
    label: str
    runs: tuple[float, ...]
    average: float


@dataclass(frozen=True)
class SummaryTable:
    """Table-shaped aggregate: per environment, the raw runs and their mean."""

    environments: tuple[EnvironmentSummary, ...]

    def averages(self) -> dict[str, float]:
        return {e.label: e.average for e in self.environments}


# --------------------------------------------------------------------------
# Plan execution


def _node_env() -> dict[str, str]:
    env = dict(os.environ)
    env.update(_SINGLE_THREAD_ENV)
    # Make the package importable in children even when running from source.
    src_dir = str(Path(__file__).resolve().parent.parent)
    existing = env.get("PYTHONPATH")
    env["PYTHONPATH"] = src_dir if not existing else src_dir + os.pathsep + existing
    return env


def _terminate(procs: list[subprocess.Popen]) -> None:
    for p in procs:
        if p.poll() is None:
            p.terminate()
    for p in procs:
        try:
            p.wait(timeout=5.0)
        except subprocess.TimeoutExpired:
            p.kill()
            p.wait()


def _tail(text: bytes, limit: int = 2000) -> str:
    return text.decode("utf-8", "replace")[-limit:].strip()


def _parse_result(stdout: bytes, context: str) -> JobResult:
    lines = [ln for ln in stdout.decode("utf-8", "replace").splitlines() if ln.strip()]
    if not lines:
        raise PlanError(f"{context}: node produced no result")
    try:
        return JobResult.from_json_obj(json.loads(lines[-1]))
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise PlanError(f"{context}: unreadable result: {exc}") from exc


def _run_one(env_spec: Environment, run_index: int, config_path: Path,
             plan: ExperimentPlan) -> JobResult:
    context = f"{env_spec.label} run {run_index}"
    node_env = _node_env()
    procs: list[subprocess.Popen] = []
    try:
        if env_spec.worker_count == 0:
            cmd = [sys.executable, "-m", "parlin", "run", "--config", str(config_path)]
            master = subprocess.Popen(cmd, stdout=subprocess.PIPE,
                                      stderr=subprocess.PIPE, env=node_env)
            procs.append(master)
            workers = []
        else:
            cmd = [sys.executable, "-m", "parlin", "master",
                   "--config", str(config_path), "--port", str(plan.port),
                   "--expected-workers", str(env_spec.worker_count)]
            master = subprocess.Popen(cmd, stdout=subprocess.PIPE,
                                      stderr=subprocess.PIPE, env=node_env)
            procs.append(master)
            workers = []
            for rank in range(env_spec.worker_count):
                wcmd = [sys.executable, "-m", "parlin", "worker",
                        "--master", f"127.0.0.1:{plan.port}", "--rank", str(rank),
                        "--connect-timeout", str(plan.admission_timeout_s)]
                w = subprocess.Popen(wcmd, stdout=subprocess.DEVNULL,
                                     stderr=subprocess.PIPE, env=node_env)
                workers.append(w)
                procs.append(w)
    except OSError as exc:
        _terminate(procs)
        raise PlanError(f"{context}: cannot spawn node process: {exc}") from exc

    try:
        out, err = master.communicate(timeout=plan.run_timeout_s)
    except subprocess.TimeoutExpired:
        _terminate(procs)
        raise PlanError(f"{context}: run exceeded {plan.run_timeout_s:.0f}s")
    if master.returncode != 0:
        _terminate(procs)
        raise PlanError(
            f"{context}: master exited {master.returncode}: {_tail(err)}",
            exit_code=master.returncode if master.returncode in (2, 3, 4) else 2)
    failures = []
    for rank, w in enumerate(workers):
        try:
            _, werr = w.communicate(timeout=30.0)
        except subprocess.TimeoutExpired:
            _terminate([w])
            werr = b"did not exit after shutdown"
        if w.returncode != 0:
            failures.append(f"worker {rank} exited {w.returncode}: {_tail(werr)}")
    if failures:
        raise PlanError(f"{context}: " + "; ".join(failures))
    return _parse_result(out, context)


def run_plan_collect(plan: ExperimentPlan) -> tuple[list[TimingRecord], list[JobResult]]:
    """Run the full plan in block order and return timings plus raw results."""
    if not Path(plan.job.dataset_path).is_file():
        raise DatasetError(f"dataset file not found: {plan.job.dataset_path}")

    from .config import job_config_document

    records: list[TimingRecord] = []
    results: list[JobResult] = []
    with tempfile.TemporaryDirectory(prefix="parlin-bench-") as tmp:
        config_path = Path(tmp) / "job_config.json"
        config_path.write_text(
            json.dumps(job_config_document(plan), indent=2) + "\n", encoding="utf-8")
        for env_spec in plan.environments:
            for run_index in range(1, plan.repetitions + 1):
                log.info("running %s repetition %d/%d", env_spec.label,
                         run_index, plan.repetitions)
                result = _run_one(env_spec, run_index, config_path, plan)
                records.append(TimingRecord(env_spec.label, run_index,
                                            result.wall_seconds))
                results.append(result)
    return records, results


def run_plan(plan: ExperimentPlan) -> list[TimingRecord]:
    """Run the plan and return one TimingRecord per (environment, repetition)."""
    records, _ = run_plan_collect(plan)
    return records


# --------------------------------------------------------------------------
# Aggregation


def summarize(records: list[TimingRecord]) -> SummaryTable:
    """Arithmetic mean per environment, preserving first-seen order."""
    if not records:
        raise ValueError("cannot summarize an empty record list")
    by_env: dict[str, list[TimingRecord]] = {}
    for rec in records:
        by_env.setdefault(rec.environment_label, []).append(rec)
    rows = []
    for label, recs in by_env.items():
        recs = sorted(recs, key=lambda r: r.run_index)
        runs = tuple(r.wall_seconds for r in recs)
        rows.append(EnvironmentSummary(label, runs, math.fsum(runs) / len(runs)))
    return SummaryTable(tuple(rows))


def percent_reduction(baseline_avg: float, candidate_avg: float) -> float:
    """Unrounded 100*(baseline - candidate)/baseline; negative for slowdowns."""
    if not baseline_avg > 0:
        raise ValueError("baseline average must be > 0")
    return 100.0 * (baseline_avg - candidate_avg) / baseline_avg


def round_half_up(x: float, ndigits: int = 2) -> float:
    """Display rounding with ties going away from zero (unlike round())."""
    q = Decimal(1).scaleb(-ndigits)
    return float(Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_UP))


# --------------------------------------------------------------------------
# Reports


def _require_rectangular(table: SummaryTable) -> int:
    counts = {len(e.runs) for e in table.environments}
    if len(counts) != 1:
        raise ValueError(f"environments have unequal run counts: {sorted(counts)}")
    return counts.pop()


def _write_summary_csv(table: SummaryTable, path: Path) -> None:
    n_runs = _require_rectangular(table)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["environment", *(f"run_{i}" for i in range(1, n_runs + 1)),
                         "average"])
        for env in table.environments:
            writer.writerow([env.label, *(repr(v) for v in env.runs),
                             repr(env.average)])


def read_summary_csv(path) -> list[TimingRecord]:
    """Parse a summary.csv back into timing records (averages are recomputed)."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "environment" or rows[0][-1] != "average":
        raise ValueError(f"{path}: not a summary.csv")
    records = []
    for row in rows[1:]:
        label, *values, _avg = row
        for i, v in enumerate(values, start=1):
            records.append(TimingRecord(label, i, float(v)))
    return records


def _write_scaling_svg(table: SummaryTable, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [e.label for e in table.environments]
    averages = [e.average for e in table.environments]
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    ax.plot(range(len(labels)), averages, marker="o", color="#1f77b4")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels)
    ax.set_xlabel("environment")
    ax.set_ylabel("average computation time (seconds)")
    ax.set_title("Average computation time by environment")
    ax.set_ylim(bottom=0.0)
    ax.grid(True, linestyle=":", alpha=0.6)
    for x, y in enumerate(averages):
        ax.annotate(f"{y:.2f}", (x, y), textcoords="offset points",
                    xytext=(0, 8), ha="center", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def emit_report(table: SummaryTable, output_dir) -> dict[str, Path]:
    """Write summary.csv, scaling.svg, and report.json; returns their paths."""
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create report directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise DatasetError(f"report directory {out} is not writable")

    csv_path = out / "summary.csv"
    svg_path = out / "scaling.svg"
    json_path = out / "report.json"

    _write_summary_csv(table, csv_path)
    _write_scaling_svg(table, svg_path)

    baseline = table.environments[0]
    best = min(table.environments, key=lambda e: e.average)
    reduction = percent_reduction(baseline.average, best.average)
    report = {
        "baseline": {"label": baseline.label, "average": baseline.average},
        "best": {"label": best.label, "average": best.average},
        "percent_reduction": reduction,
        "percent_reduction_display": round_half_up(reduction, 2),
        "environments": [{"label": e.label, "average": e.average}
                         for e in table.environments],
        "timing_window": TIMING_WINDOW_NOTE,
    }
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
    return {"summary_csv": csv_path, "scaling_svg": svg_path,
            "report_json": json_path}


# --------------------------------------------------------------------------
# Raw record persistence (lets `report` re-render without re-running)


def write_records(records: list[TimingRecord], path) -> None:
    obj = {"records": [{"environment_label": r.environment_label,
                        "run_index": r.run_index,
                        "wall_seconds": r.wall_seconds} for r in records]}
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def read_records(path) -> list[TimingRecord]:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return [TimingRecord(str(r["environment_label"]), int(r["run_index"]),
                             float(r["wall_seconds"])) for r in obj["records"]]
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"cannot read records file {path}: {exc}") from exc
