"""Shared fixtures: tiny datasets, CLI subprocess helpers, in-process clusters."""

from __future__ import annotations

import json
import os
import socket
import subprocess
import sys
import threading
from pathlib import Path

import pytest

import parlin
from parlin.cluster import JobSpec, master_run, worker_run
from parlin.core import TrainConfig
from parlin.data import DatasetSpec, generate_synthetic

SRC_DIR = str(Path(parlin.__file__).resolve().parent.parent)


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def cli_env(**extra: str) -> dict:
    env = dict(os.environ)
    env["PYTHONPATH"] = SRC_DIR + os.pathsep + env.get("PYTHONPATH", "")
    env.update(extra)
    return env


def run_cli(*args: str, timeout: float = 120.0, env: dict | None = None,
            check: bool = False) -> subprocess.CompletedProcess:
    proc = subprocess.run([sys.executable, "-m", "parlin", *map(str, args)],
                          capture_output=True, text=True, timeout=timeout,
                          env=env or cli_env())
    if check and proc.returncode != 0:
        raise AssertionError(
            f"parlin {' '.join(map(str, args))} exited {proc.returncode}:\n"
            f"{proc.stderr}")
    return proc


def spawn_worker_proc(port: int, rank: int, *, connect_timeout: float = 20.0,
                      env: dict | None = None) -> subprocess.Popen:
    return subprocess.Popen(
        [sys.executable, "-m", "parlin", "worker",
         "--master", f"127.0.0.1:{port}", "--rank", str(rank),
         "--connect-timeout", str(connect_timeout)],
        stdout=subprocess.DEVNULL, stderr=subprocess.PIPE, text=True,
        env=env or cli_env())


def cluster_run_threaded(job: JobSpec, port: int, *, admission_timeout: float = 20.0):
    """Run master in-process with worker threads; returns (result, worker statuses)."""
    holder: dict = {}

    def _master():
        try:
            holder["result"] = master_run(job, port,
                                          admission_timeout_s=admission_timeout)
        except BaseException as exc:  # surfaced to the caller
            holder["error"] = exc

    statuses: list[tuple[int, int]] = []
    master_thread = threading.Thread(target=_master)
    master_thread.start()
    worker_threads = [
        threading.Thread(
            target=lambda r=rank: statuses.append(
                (r, worker_run(f"127.0.0.1:{port}", r, connect_timeout_s=10.0))))
        for rank in range(job.expected_workers)
    ]
    for t in worker_threads:
        t.start()
    master_thread.join(timeout=120.0)
    for t in worker_threads:
        t.join(timeout=30.0)
    if "error" in holder:
        raise holder["error"]
    assert "result" in holder, "master did not finish"
    return holder["result"], sorted(statuses)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """5k-row noisy flight dataset shared by cluster/CLI tests."""
    path = tmp_path_factory.mktemp("data") / "flights_small.csv"
    spec = DatasetSpec(n_records=5000, noise_sigma=4.0, seed=1234)
    summary = generate_synthetic(spec, path)
    return {"path": path, "spec": spec, "schema": spec.schema(),
            "summary": summary}


@pytest.fixture()
def job_factory(small_dataset):
    def make(workers: int = 0, mode: str = "normal_equations", **kwargs) -> JobSpec:
        train = TrainConfig(mode=mode, **kwargs)
        return JobSpec(dataset_path=str(small_dataset["path"]),
                       schema=small_dataset["schema"], train_config=train,
                       split_ratio=0.7, split_seed=99, expected_workers=workers)

    return make


def write_config(path: Path, doc: dict) -> Path:
    path.write_text(json.dumps(doc, indent=2), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# one visible pass/fail line per acceptance criterion

_ACCEPTANCE_OUTCOMES: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::" not in report.nodeid:
        return
    name = report.nodeid.split("::", 1)[1]
    if report.when == "call" or (report.when == "setup" and report.skipped):
        outcome = "skipped" if report.skipped else report.outcome
        _ACCEPTANCE_OUTCOMES[name] = outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_OUTCOMES:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name in sorted(_ACCEPTANCE_OUTCOMES):
        outcome = _ACCEPTANCE_OUTCOMES[name]
        terminalreporter.write_line(
            f"ACCEPTANCE {name}: {outcome.upper()}")
