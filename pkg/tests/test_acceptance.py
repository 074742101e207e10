"""Acceptance criteria, one test per criterion at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v -s``; a PASS/FAIL line per
criterion is also printed in the terminal summary.
"""

from __future__ import annotations

import math
import os
import signal
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import cli_env, free_port, run_cli, spawn_worker_proc, write_config
from parlin.bench import (
    Environment,
    ExperimentPlan,
    percent_reduction,
    round_half_up,
    run_plan,
    summarize,
)
from parlin.cluster import JobSpec, master_run, standalone_run
from parlin.core import (
    ModelCoefficients,
    SampleBlock,
    compute_gradient_partial,
    compute_gram_partial,
    merge_gram,
    rmse,
    solve_normal,
    train_test_split,
)
from parlin.core import TrainConfig
from parlin.data import DatasetSpec, generate_synthetic
from parlin.protocol import decode_frame, encode_frame
from test_bench import TABLE_1, TABLE_1_AVERAGES, table_records
from test_protocol import ONE_OF_EACH

pytestmark = pytest.mark.acceptance


def physical_cores() -> int:
    try:
        import psutil

        count = psutil.cpu_count(logical=False)
        if count:
            return count
    except ImportError:
        pass
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# Criterion 1: Table-1 arithmetic reproduction (exact at display rounding)


def test_c1_table1_arithmetic():
    table = summarize(table_records())
    averages = [env.average for env in table.environments]
    for got, want in zip(averages, TABLE_1_AVERAGES):
        assert math.isclose(got, want, rel_tol=1e-12)
        assert round_half_up(got, 2) == want
    reduction = percent_reduction(averages[0], min(averages))
    assert round_half_up(reduction, 2) == 39.76
    print(f"\ncriterion 1: averages {[round_half_up(a, 2) for a in averages]}, "
          f"reduction {round_half_up(reduction, 2)}%")


# ---------------------------------------------------------------------------
# Criterion 2: distributed equals local on 50k rows, workers 1..4


@pytest.fixture(scope="module")
def dataset_50k(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("acc2")
    spec = DatasetSpec(n_records=50_000, n_features=8, noise_sigma=6.0, seed=2024)
    generate_synthetic(spec, tmp / "d.csv")
    return {"path": tmp / "d.csv", "spec": spec}


def test_c2_distributed_equals_local(dataset_50k):
    spec = dataset_50k["spec"]

    def job(workers):
        return JobSpec(str(dataset_50k["path"]), spec.schema(), TrainConfig(),
                       split_ratio=0.7, split_seed=2024,
                       expected_workers=workers)

    results = {0: standalone_run(job(0))}
    for k in range(1, 5):
        port = free_port()
        workers = [spawn_worker_proc(port, rank) for rank in range(k)]
        try:
            results[k] = master_run(job(k), port, admission_timeout_s=30.0)
        finally:
            for w in workers:
                assert w.wait(timeout=30) == 0
    vectors = {k: r.coefficients.as_vector() for k, r in results.items()}
    for a in vectors:
        for b in vectors:
            assert np.all(np.abs(vectors[a] - vectors[b])
                          <= 1e-8 * (1.0 + np.abs(vectors[b]))), (a, b)
    print(f"\ncriterion 2: coefficients agree across k=0..4; "
          f"max spread {max(np.max(np.abs(vectors[a] - vectors[0])) for a in vectors):.3e}")


# ---------------------------------------------------------------------------
# Criterion 3: RMSE calibration at sigma = 13.149, n = 200k


def test_c3_rmse_calibration(tmp_path):
    sigma = 13.149
    spec = DatasetSpec(n_records=200_000, n_features=8, noise_sigma=sigma,
                       seed=314)
    generate_synthetic(spec, tmp_path / "d.csv")
    job = JobSpec(str(tmp_path / "d.csv"), spec.schema(), TrainConfig(),
                  split_ratio=0.7, split_seed=314, expected_workers=0)
    result = standalone_run(job)
    assert 0.95 * sigma <= result.eval.rmse <= 1.05 * sigma
    print(f"\ncriterion 3: test rmse {result.eval.rmse:.4f} minutes "
          f"(target {sigma} +-5%)")


# ---------------------------------------------------------------------------
# Criterion 4: scaling trend with the default GD bench job


@pytest.mark.slow
@pytest.mark.skipif(physical_cores() < 4,
                    reason="criterion requires >= 4 physical cores; "
                           f"this machine has {physical_cores()}")
def test_c4_scaling_trend(tmp_path):
    spec = DatasetSpec(n_records=500_000, n_features=8, noise_sigma=13.149,
                       seed=500)
    generate_synthetic(spec, tmp_path / "d.csv")
    job = JobSpec(str(tmp_path / "d.csv"), spec.schema(),
                  TrainConfig(mode="gradient_descent", iterations=50),
                  split_ratio=0.7, split_seed=500)
    plan = ExperimentPlan(
        job,
        environments=(Environment("Standalone", 0), Environment("Cluster_1", 1),
                      Environment("Cluster_2", 2), Environment("Cluster_4", 4)),
        repetitions=3,
        port=free_port(),
    )
    means = summarize(run_plan(plan)).averages()
    s, m1, m2, m4 = (means["Standalone"], means["Cluster_1"],
                     means["Cluster_2"], means["Cluster_4"])
    print(f"\ncriterion 4: standalone {s:.2f}s, 1w {m1:.2f}s, 2w {m2:.2f}s, "
          f"4w {m4:.2f}s, speedup {m1 / m4:.2f}x")
    assert m4 < m1, "4 workers must beat 1 worker"
    assert m1 <= 1.15 * s, "1-worker overhead above the 15% bound"
    assert m1 / m4 >= 1.3, "expected >= 1.3x speedup at 4 workers"
    assert m1 > m2 > m4, "Figure-2 shape: monotone decreasing over {1, 2, 4}"


# ---------------------------------------------------------------------------
# Criterion 5: numerical property suite


def test_c5_numerical_properties():
    rng = np.random.default_rng(95)

    # merge_gram associativity and commutativity, 200 random cases, 1e-12
    def random_partial(d):
        n = int(rng.integers(1, 20))
        return compute_gram_partial(SampleBlock(rng.normal(size=(n, d)),
                                                rng.normal(size=n)))

    for _ in range(200):
        d = int(rng.integers(1, 6))
        p, q, r = random_partial(d), random_partial(d), random_partial(d)
        left = merge_gram(merge_gram(p, q), r)
        right = merge_gram(p, merge_gram(q, r))
        assert np.all(np.abs(left.a - right.a) <= 1e-12 * (1.0 + np.abs(right.a)))
        pq, qp = merge_gram(p, q), merge_gram(q, p)
        assert np.all(np.abs(pq.a - qp.a) <= 1e-12 * (1.0 + np.abs(qp.a)))
        assert np.all(np.abs(pq.b - qp.b) <= 1e-12 * (1.0 + np.abs(qp.b)))

    # gradient vs central finite differences, 50 cases, 1e-4
    from test_core import fd_gradient

    for _ in range(50):
        d = int(rng.integers(1, 5))
        n = int(rng.integers(5, 40))
        block = SampleBlock(rng.normal(size=(n, d)), rng.normal(size=n))
        theta_vec = rng.normal(size=d + 1)
        grad, _ = compute_gradient_partial(
            block, ModelCoefficients.from_vector(theta_vec))
        fd = fd_gradient(block, theta_vec)
        assert np.all(np.abs(fd - grad) <= 1e-4 * (1.0 + np.abs(grad)))

    # noiseless coefficient recovery at 1e-9
    for d in (2, 8, 16):
        n = 20 * d
        x = rng.uniform(-2.0, 2.0, size=(n, d))
        true = rng.normal(size=d + 1)
        y = true[0] + x @ true[1:]
        theta = solve_normal(compute_gram_partial(SampleBlock(x, y)))
        assert np.all(np.abs(theta.as_vector() - true) <= 1e-9 * (1.0 + np.abs(true)))

    # rmse nonnegativity and zero-iff-equal
    for _ in range(50):
        p = rng.normal(size=10)
        o = rng.normal(size=10)
        assert rmse(p, o).rmse >= 0.0
        assert rmse(p, p).rmse == 0.0
        if not np.array_equal(p, o):
            assert rmse(p, o).rmse > 0.0

    # split partition exactness for every n up to 1000
    for n in range(2, 1001):
        train, test = train_test_split(n, 0.7, seed=n)
        combined = np.concatenate([train, test])
        assert len(combined) == n and len(np.unique(combined)) == n
        assert len(train) == math.floor(0.7 * n)
    print("\ncriterion 5: merge/gradient/recovery/rmse/split properties hold")


# ---------------------------------------------------------------------------
# Criterion 6: protocol suite


def test_c6_protocol_suite(tmp_path):
    # frame round-trip for every message kind
    from parlin.protocol import _DECODERS

    assert {type(m).__name__ for m in ONE_OF_EACH} == set(_DECODERS)
    for msg in ONE_OF_EACH:
        assert decode_frame(encode_frame(msg)) == msg

    spec = DatasetSpec(n_records=4000, noise_sigma=2.0, seed=66)
    generate_synthetic(spec, tmp_path / "d.csv")
    config = write_config(tmp_path / "cfg.json", {
        "dataset": {"path": str(tmp_path / "d.csv"),
                    "schema": spec.schema().to_json_obj()},
        "train": {"mode": "gradient_descent", "iterations": 4000,
                  "learning_rate": 0.05},
        "split": {"ratio": 0.7, "seed": 6},
    })

    # duplicate-rank rejection (scripted second worker on the same rank)
    import socket
    import threading

    from parlin.errors import WorkerFailureError
    from parlin.protocol import Fail, Hello, HelloAck, recv_message, send_message

    port = free_port()
    job = JobSpec(str(tmp_path / "d.csv"), spec.schema(),
                  TrainConfig(), split_seed=6, expected_workers=2)
    holder: dict = {}

    def run_master_thread():
        try:
            holder["result"] = master_run(job, port, admission_timeout_s=10.0)
        except BaseException as exc:
            holder["error"] = exc

    thread = threading.Thread(target=run_master_thread)
    thread.start()
    conns = []
    try:
        deadline = time.monotonic() + 5.0
        while True:
            try:
                c0 = socket.create_connection(("127.0.0.1", port), timeout=5)
                break
            except OSError:
                assert time.monotonic() < deadline
                time.sleep(0.05)
        c0.settimeout(5.0)
        conns.append(c0)
        send_message(c0, Hello(worker_rank=0))
        assert isinstance(recv_message(c0), HelloAck)

        dup = socket.create_connection(("127.0.0.1", port), timeout=5)
        dup.settimeout(5.0)
        conns.append(dup)
        send_message(dup, Hello(worker_rank=0))
        reply = recv_message(dup)
        assert isinstance(reply, Fail) and "0" in reply.reason

        c1 = socket.create_connection(("127.0.0.1", port), timeout=5)
        c1.settimeout(5.0)
        conns.append(c1)
        send_message(c1, Hello(worker_rank=1))
        assert isinstance(recv_message(c1), HelloAck)
    finally:
        for c in conns:
            c.close()
        thread.join(timeout=20)
    assert isinstance(holder.get("error"), WorkerFailureError)

    # mid-job worker kill aborts with exit code 2
    port = free_port()
    master = subprocess.Popen(
        [sys.executable, "-m", "parlin", "master", "--config", str(config),
         "--port", str(port), "--expected-workers", "2"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, env=cli_env())
    workers = [spawn_worker_proc(port, 0), spawn_worker_proc(port, 1)]
    time.sleep(2.0)
    workers[1].send_signal(signal.SIGKILL)
    _out, err = master.communicate(timeout=60)
    for w in workers:
        w.wait(timeout=30)
    assert master.returncode == 2, err

    # admission timeout yields exit code 3
    timeout_config = write_config(tmp_path / "cfg_timeout.json", {
        "dataset": {"path": str(tmp_path / "d.csv"),
                    "schema": spec.schema().to_json_obj()},
        "cluster": {"expected_workers": 1, "admission_timeout_s": 0.5},
    })
    proc = run_cli("master", "--config", timeout_config,
                   "--port", str(free_port()), timeout=30)
    assert proc.returncode == 3
    print("\ncriterion 6: round-trip, duplicate-rank, kill=2, timeout=3 all hold")
