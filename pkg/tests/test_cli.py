"""CLI contracts: exit codes, strict config handling, end-to-end subcommands."""

from __future__ import annotations

import json
import signal
import subprocess
import sys
import time
import zlib

import numpy as np
import pytest

from conftest import cli_env, free_port, run_cli, spawn_worker_proc, write_config


def base_config(dataset_path=None, **overrides) -> dict:
    doc = {
        "dataset": {"spec": {"n_records": 3000, "noise_sigma": 2.0, "seed": 42}},
        "train": {"mode": "normal_equations"},
        "split": {"ratio": 0.7, "seed": 13},
    }
    if dataset_path is not None:
        doc["dataset"] = {
            "path": str(dataset_path),
            "schema": {"feature_columns": [
                "day_of_week", "month", "scheduled_departure_hour",
                "distance_miles", "carrier_index", "origin_congestion_score",
                "weather_severity_score", "days_to_holiday"]},
        }
    doc.update(overrides)
    return doc


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    config = write_config(tmp / "gen.json", base_config())
    data_path = tmp / "data.csv"
    proc = run_cli("gen-data", "--config", config, "--out", data_path, check=True)
    return {"tmp": tmp, "data": data_path,
            "summary": json.loads(proc.stdout.strip())}


# ---------------------------------------------------------------------------
# usage


def test_no_arguments_prints_usage_and_exits_1():
    proc = run_cli()
    assert proc.returncode == 1
    assert "usage" in proc.stderr.lower()
    assert proc.stdout == ""


def test_unknown_subcommand_exits_1():
    proc = run_cli("frobnicate")
    assert proc.returncode == 1
    assert "usage" in proc.stderr.lower()


def test_unknown_flag_exits_1():
    proc = run_cli("run", "--config", "x.json", "--turbo")
    assert proc.returncode == 1


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_summary_and_checksum(generated):
    summary = generated["summary"]
    assert set(summary) == {"rows", "path", "checksum", "seed"}
    assert summary["rows"] == 3000 and summary["seed"] == 42
    assert summary["checksum"] == zlib.crc32(generated["data"].read_bytes())


def test_gen_data_deterministic(generated, tmp_path):
    config = write_config(tmp_path / "gen.json", base_config())
    proc = run_cli("gen-data", "--config", config, "--out", tmp_path / "again.csv",
                   check=True)
    assert json.loads(proc.stdout)["checksum"] == generated["summary"]["checksum"]


def test_gen_data_seed_override(generated, tmp_path):
    config = write_config(tmp_path / "gen.json", base_config())
    proc = run_cli("--seed", "777", "gen-data", "--config", config,
                   "--out", tmp_path / "seeded.csv", check=True)
    summary = json.loads(proc.stdout)
    assert summary["seed"] == 777
    assert summary["checksum"] != generated["summary"]["checksum"]


def test_gen_data_requires_spec(generated, tmp_path):
    config = write_config(tmp_path / "nospec.json",
                          base_config(dataset_path=generated["data"]))
    proc = run_cli("gen-data", "--config", config, "--out", tmp_path / "x.csv")
    assert proc.returncode == 4
    assert "dataset.spec" in proc.stderr


# ---------------------------------------------------------------------------
# strict config


def test_misspelled_top_level_key_exits_4(tmp_path):
    doc = base_config()
    doc["datset"] = doc.pop("dataset")
    config = write_config(tmp_path / "bad.json", doc)
    proc = run_cli("run", "--config", config)
    assert proc.returncode == 4
    assert "datset" in proc.stderr


def test_misspelled_nested_key_exits_4(tmp_path):
    doc = base_config()
    doc["split"] = {"rati": 0.7}
    config = write_config(tmp_path / "bad.json", doc)
    proc = run_cli("run", "--config", config)
    assert proc.returncode == 4
    assert "split.rati" in proc.stderr


def test_wrong_type_reported(tmp_path):
    doc = base_config()
    doc["train"] = {"iterations": "fifty"}
    config = write_config(tmp_path / "bad.json", doc)
    proc = run_cli("run", "--config", config)
    assert proc.returncode == 4
    assert "train.iterations" in proc.stderr


def test_missing_dataset_file_exits_4(tmp_path):
    config = write_config(tmp_path / "cfg.json",
                          base_config(dataset_path=tmp_path / "absent.csv"))
    proc = run_cli("run", "--config", config)
    assert proc.returncode == 4


# ---------------------------------------------------------------------------
# run / master / worker


@pytest.fixture(scope="module")
def run_config(generated):
    return write_config(generated["tmp"] / "run.json",
                        base_config(dataset_path=generated["data"]))


def test_run_standalone_outputs_job_result(run_config):
    proc = run_cli("run", "--config", run_config, check=True)
    result = json.loads(proc.stdout)
    assert result["environment_label"] == "Standalone"
    assert result["workers_used"] == 0
    assert result["wall_seconds"] > 0
    assert result["eval"]["rmse"] > 0
    assert len(result["coefficients"]["weights"]) == 8


@pytest.mark.slow
def test_master_plus_single_worker_matches_run(run_config):
    standalone = json.loads(run_cli("run", "--config", run_config,
                                    check=True).stdout)
    port = free_port()
    master = subprocess.Popen(
        [sys.executable, "-m", "parlin", "--log-level", "info", "master",
         "--config", str(run_config), "--port", str(port),
         "--expected-workers", "1"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, env=cli_env())
    worker = spawn_worker_proc(port, 0)
    out, err = master.communicate(timeout=60)
    assert master.returncode == 0, err
    assert worker.wait(timeout=30) == 0
    assert "listening" in err  # info logs land on stderr

    clustered = json.loads(out.strip().splitlines()[-1])
    assert clustered["environment_label"] == "Cluster_1"
    assert clustered["workers_used"] == 1
    got = np.array(clustered["coefficients"]["weights"])
    want = np.array(standalone["coefficients"]["weights"])
    assert np.all(np.abs(got - want) <= 1e-8 * (1.0 + np.abs(want)))
    assert clustered["coefficients"]["intercept"] == pytest.approx(
        standalone["coefficients"]["intercept"], rel=1e-8)


@pytest.mark.slow
def test_master_admission_timeout_exits_3(run_config, tmp_path):
    doc = json.loads(run_config.read_text())
    doc["cluster"] = {"expected_workers": 1, "admission_timeout_s": 0.5}
    config = write_config(tmp_path / "timeout.json", doc)
    proc = run_cli("master", "--config", config, "--port", str(free_port()),
                   timeout=30)
    assert proc.returncode == 3
    assert "timeout" in proc.stderr.lower()


@pytest.mark.slow
def test_killed_worker_aborts_master_with_exit_2(generated, tmp_path):
    # long gradient-descent job gives us a window to kill rank 1 mid-round
    doc = base_config(dataset_path=generated["data"])
    doc["train"] = {"mode": "gradient_descent", "iterations": 4000,
                    "learning_rate": 0.05}
    config = write_config(tmp_path / "kill.json", doc)
    port = free_port()
    master = subprocess.Popen(
        [sys.executable, "-m", "parlin", "master", "--config", str(config),
         "--port", str(port), "--expected-workers", "2"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, env=cli_env())
    workers = [spawn_worker_proc(port, 0), spawn_worker_proc(port, 1)]
    time.sleep(2.5)  # past admission, inside the gradient rounds
    workers[1].send_signal(signal.SIGKILL)
    out, err = master.communicate(timeout=60)
    for w in workers:
        w.wait(timeout=30)
    assert master.returncode == 2
    assert "worker 1" in err
    assert out.strip() == ""  # no JobResult on an aborted job


def test_worker_with_unreachable_master_exits_2():
    proc = run_cli("worker", "--master", "127.0.0.1:1", "--rank", "0",
                   "--connect-timeout", "0.3", timeout=30)
    assert proc.returncode == 2


# ---------------------------------------------------------------------------
# bench / report


@pytest.mark.slow
def test_bench_and_report_round_trip(generated, tmp_path):
    doc = base_config(dataset_path=generated["data"])
    doc["train"] = {"iterations": 8}
    doc["cluster"] = {"port": free_port()}
    doc["bench"] = {
        "environments": [{"label": "Standalone", "worker_count": 0},
                         {"label": "Cluster_1", "worker_count": 1}],
        "repetitions": 2,
    }
    config = write_config(tmp_path / "bench.json", doc)
    out_dir = tmp_path / "bench_out"
    proc = run_cli("bench", "--config", config, "--out", out_dir,
                   timeout=300, check=True)
    paths = json.loads(proc.stdout)
    assert set(paths) == {"records", "summary_csv", "scaling_svg", "report_json"}

    records = json.loads((out_dir / "records.json").read_text())["records"]
    assert len(records) == 4
    original_csv = (out_dir / "summary.csv").read_bytes()

    rerender = tmp_path / "rerender"
    run_cli("report", "--records", out_dir / "records.json", "--out", rerender,
            check=True)
    assert (rerender / "summary.csv").read_bytes() == original_csv

    report = json.loads((out_dir / "report.json").read_text())
    assert report["baseline"]["label"] == "Standalone"
    assert "timing_window" in report


def test_bench_requires_output_dir(generated, tmp_path):
    config = write_config(tmp_path / "nb.json",
                          base_config(dataset_path=generated["data"]))
    proc = run_cli("bench", "--config", config)
    assert proc.returncode == 4
    assert "output" in proc.stderr.lower()


def test_report_missing_records_exits_4(tmp_path):
    proc = run_cli("report", "--records", tmp_path / "none.json",
                   "--out", tmp_path / "out")
    assert proc.returncode == 4
