"""Master/worker execution of a training job, plus the network-free standalone path.

The master owns the job lifecycle: admit exactly the expected workers, assign
each one a contiguous raw-row range of the shared dataset file, drive
synchronous compute rounds (one request, one reply per worker, merged in
ascending rank order), and time the whole thing on a monotonic clock from
"all workers admitted" to "result ready". Workers recompute the train/test
split locally from the seed and ratio carried in the assignment, so no row
data ever crosses the wire.
"""

from __future__ import annotations

import logging
import math
import socket
import threading
import time
import uuid
from dataclasses import dataclass
from functools import reduce

import numpy as np

from . import core
from .core import EvalReport, GramPartial, ModelCoefficients, TrainConfig
from .data import CsvSchema, count_data_rows, make_partitions, validate_header
from .errors import (
    AdmissionTimeoutError,
    DatasetError,
    ParlinError,
    ProtocolError,
    WorkerFailureError,
)
from .protocol import (
    PROTOCOL_VERSION,
    Assign,
    ComputeGradient,
    ComputeGram,
    ComputeSse,
    Done,
    Fail,
    GradientResult,
    GramResult,
    Hello,
    HelloAck,
    Message,
    Shutdown,
    SseResult,
    recv_message,
    send_message,
)

__all__ = [
    "JobSpec",
    "JobResult",
    "DEFAULT_PORT",
    "master_run",
    "worker_run",
    "standalone_run",
]

log = logging.getLogger(__name__)

DEFAULT_PORT = 7077
DEFAULT_ADMISSION_TIMEOUT_S = 60.0
DEFAULT_IO_TIMEOUT_S = 600.0
MAX_WORKERS = 64


@dataclass(frozen=True)
class JobSpec:
    """Everything needed to run one training job against a shared dataset file."""

    dataset_path: str
    schema: CsvSchema
    train_config: TrainConfig
    split_ratio: float = 0.7
    split_seed: int = 0
    expected_workers: int = 0

    def __post_init__(self):
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError("split_ratio must lie strictly between 0 and 1")
        if not 0 <= self.expected_workers <= MAX_WORKERS:
            raise ValueError(f"expected_workers must be in [0, {MAX_WORKERS}]")


@dataclass(frozen=True)
class JobResult:
    """Outcome of one job: the model, its test error, and the timed window."""

    coefficients: ModelCoefficients
    eval: EvalReport
    wall_seconds: float
    environment_label: str
    workers_used: int

    def to_json_obj(self) -> dict:
        return {
            "environment_label": self.environment_label,
            "workers_used": self.workers_used,
            "wall_seconds": self.wall_seconds,
            "coefficients": {
                "intercept": self.coefficients.intercept,
                "weights": self.coefficients.weights.tolist(),
                "ridge_fallback": self.coefficients.ridge_fallback,
            },
            "eval": {"rmse": self.eval.rmse, "n_test": self.eval.n_test,
                     "sse": self.eval.sse},
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "JobResult":
        c = obj["coefficients"]
        e = obj["eval"]
        return cls(
            coefficients=ModelCoefficients(
                float(c["intercept"]), np.array(c["weights"], dtype=np.float64),
                bool(c.get("ridge_fallback", False))),
            eval=EvalReport(float(e["rmse"]), int(e["n_test"]), float(e["sse"])),
            wall_seconds=float(obj["wall_seconds"]),
            environment_label=str(obj["environment_label"]),
            workers_used=int(obj["workers_used"]),
        )


# --------------------------------------------------------------------------
# Shared training pipeline


class _LocalExecutor:
    """In-process stand-in for a single worker covering the whole file."""

    def __init__(self, job: JobSpec):
        self.job = job
        self._train = None
        self._test = None

    def _ensure_loaded(self):
        if self._train is None:
            from .data import load_partition

            block = load_partition(self.job.dataset_path, self.job.schema)
            mask = core.split_mask(block.file_rows, self.job.split_ratio,
                                   self.job.split_seed)
            self._train = block.select(mask)
            self._test = block.select(~mask)

    def gram(self, scope: str) -> list[GramPartial]:
        self._ensure_loaded()
        block = self._train if scope == "train" else self._test
        return [core.compute_gram_partial(block)]

    def gradient(self, theta: ModelCoefficients) -> list[tuple[np.ndarray, int]]:
        self._ensure_loaded()
        return [core.compute_gradient_partial(self._train, theta)]

    def sse(self, theta: ModelCoefficients) -> list[tuple[float, int]]:
        self._ensure_loaded()
        return [(core.sse_block(theta, self._test), len(self._test))]


class _RemoteExecutor:
    """One synchronous request/reply round at a time over rank-ordered sockets."""

    def __init__(self, conns: list[socket.socket]):
        self.conns = conns

    def _round(self, request: Message, expected_kind: type) -> list[Message]:
        for rank, conn in enumerate(self.conns):
            try:
                send_message(conn, request)
            except OSError as exc:
                raise WorkerFailureError(
                    f"worker {rank} unreachable: {exc}", ranks=(rank,)) from exc
        replies: list[Message] = []
        for rank, conn in enumerate(self.conns):
            try:
                msg = recv_message(conn)
            except (ProtocolError, OSError) as exc:
                raise WorkerFailureError(
                    f"worker {rank} failed mid-round: {exc}", ranks=(rank,)) from exc
            if isinstance(msg, Fail):
                raise WorkerFailureError(
                    f"worker {rank} reported failure: {msg.reason}", ranks=(rank,))
            if not isinstance(msg, expected_kind):
                raise WorkerFailureError(
                    f"worker {rank} sent {type(msg).__name__}, expected "
                    f"{expected_kind.__name__}", ranks=(rank,))
            replies.append(msg)
        return replies

    def gram(self, scope: str) -> list[GramPartial]:
        return [m.partial for m in self._round(ComputeGram(scope), GramResult)]

    def gradient(self, theta: ModelCoefficients) -> list[tuple[np.ndarray, int]]:
        return [(m.grad_sum, m.n)
                for m in self._round(ComputeGradient(theta), GradientResult)]

    def sse(self, theta: ModelCoefficients) -> list[tuple[float, int]]:
        return [(m.sse, m.n) for m in self._round(ComputeSse(theta), SseResult)]


def _train_and_evaluate(executor, cfg: TrainConfig,
                        schema: CsvSchema) -> tuple[ModelCoefficients, EvalReport]:
    # Gradient descent also starts with one train-scope Gram round: it yields
    # the global row count plus the per-column stats used to standardize,
    # without a dedicated message kind.
    partials = executor.gram("train")
    train_partial = reduce(core.merge_gram, partials)
    if train_partial.n < 1:
        raise DatasetError("train split is empty")

    if cfg.mode == "normal_equations":
        theta = core.solve_normal(train_partial, cfg.ridge_epsilon)
    else:
        mean, std = core.gram_column_stats(train_partial, schema.feature_columns)
        theta_std = ModelCoefficients(0.0, np.zeros(schema.n_features))
        for _ in range(cfg.iterations):
            theta_raw = core.raw_coefficients(theta_std, mean, std)
            replies = executor.gradient(theta_raw)
            grad_raw = reduce(np.add, [g for g, _ in replies])
            n_total = sum(n for _, n in replies)
            grad_std = core.standardized_gradient(grad_raw, mean, std)
            theta_std = core.gd_step(theta_std, grad_std, n_total, cfg.learning_rate)
        theta = core.raw_coefficients(theta_std, mean, std)

    sse_replies = executor.sse(theta)
    sse_total = math.fsum(s for s, _ in sse_replies)
    n_test = sum(n for _, n in sse_replies)
    if n_test < 1:
        raise DatasetError("test split is empty")
    report = EvalReport(rmse=math.sqrt(sse_total / n_test), n_test=n_test,
                        sse=sse_total)
    return theta, report


# --------------------------------------------------------------------------
# Master


def _set_nodelay(conn: socket.socket) -> None:
    try:
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    except OSError:
        pass


class _Admission:
    """Collect Hello handshakes until every rank 0..k-1 is present."""

    def __init__(self, expected: int, job_id: str):
        self.expected = expected
        self.job_id = job_id
        self.lock = threading.Lock()
        self.admitted: dict[int, socket.socket] = {}
        self.complete = threading.Event()

    def handle(self, conn: socket.socket) -> None:
        try:
            msg = recv_message(conn)
            if not isinstance(msg, Hello):
                send_message(conn, Fail("expected Hello"))
                conn.close()
                return
            if msg.protocol_version != PROTOCOL_VERSION:
                send_message(conn, Fail(
                    f"protocol version mismatch: master speaks {PROTOCOL_VERSION}, "
                    f"worker sent {msg.protocol_version}"))
                conn.close()
                return
            rank = msg.worker_rank
            if not 0 <= rank < self.expected:
                send_message(conn, Fail(
                    f"rank {rank} out of range for {self.expected} workers"))
                conn.close()
                return
            with self.lock:
                if rank in self.admitted:
                    duplicate = True
                else:
                    self.admitted[rank] = conn
                    duplicate = False
                    if len(self.admitted) == self.expected:
                        self.complete.set()
            if duplicate:
                send_message(conn, Fail(f"rank {rank} already admitted"))
                conn.close()
                return
            send_message(conn, HelloAck(self.job_id))
            log.info("admitted worker rank %d", rank)
        except (ProtocolError, OSError) as exc:
            log.warning("handshake failed: %s", exc)
            try:
                conn.close()
            except OSError:
                pass

    def close_all(self) -> None:
        with self.lock:
            for conn in self.admitted.values():
                try:
                    conn.close()
                except OSError:
                    pass


def _admit_workers(listener: socket.socket, expected: int, job_id: str,
                   timeout_s: float) -> list[socket.socket]:
    admission = _Admission(expected, job_id)
    deadline = time.monotonic() + timeout_s
    listener.settimeout(0.1)
    while not admission.complete.is_set():
        if time.monotonic() > deadline:
            admission.close_all()
            raise AdmissionTimeoutError(
                f"only {len(admission.admitted)} of {expected} workers joined "
                f"within {timeout_s:.0f}s")
        try:
            conn, _addr = listener.accept()
        except socket.timeout:
            continue
        _set_nodelay(conn)
        conn.settimeout(max(deadline - time.monotonic(), 1.0))
        threading.Thread(target=admission.handle, args=(conn,), daemon=True).start()
    return [admission.admitted[r] for r in range(expected)]


def _abort_workers(conns: list[socket.socket], reason: str) -> None:
    for conn in conns:
        try:
            conn.settimeout(2.0)
            send_message(conn, Fail(reason))
        except OSError:
            pass
        try:
            conn.close()
        except OSError:
            pass


def _shutdown_workers(conns: list[socket.socket]) -> None:
    for conn in conns:
        try:
            conn.settimeout(10.0)
            send_message(conn, Shutdown())
            reply = recv_message(conn)
            if not isinstance(reply, Done):
                log.warning("worker answered shutdown with %s", type(reply).__name__)
        except (ProtocolError, OSError) as exc:
            log.warning("shutdown handshake incomplete: %s", exc)
        finally:
            try:
                conn.close()
            except OSError:
                pass


def master_run(job: JobSpec, listen_port: int = DEFAULT_PORT, *,
               admission_timeout_s: float = DEFAULT_ADMISSION_TIMEOUT_S,
               io_timeout_s: float = DEFAULT_IO_TIMEOUT_S,
               bind_host: str = "127.0.0.1",
               environment_label: str | None = None,
               job_id: str | None = None) -> JobResult:
    """Coordinate a cluster job and return its result.

    Raises :class:`AdmissionTimeoutError` when workers do not all join,
    :class:`WorkerFailureError` when any worker fails or disconnects mid-job
    (the job aborts; nothing is re-executed), and :class:`DatasetError` for
    dataset problems.
    """
    if job.expected_workers < 1:
        raise ValueError("master_run needs expected_workers >= 1")
    validate_header(job.dataset_path, job.schema)
    k = job.expected_workers
    label = environment_label if environment_label is not None else f"Cluster_{k}"
    job_id = job_id if job_id is not None else uuid.uuid4().hex[:12]

    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        listener.bind((bind_host, listen_port))
        listener.listen(k + 8)
        log.info("master listening on %s:%d for %d workers", bind_host,
                 listen_port, k)
        conns = _admit_workers(listener, k, job_id, admission_timeout_s)
    finally:
        listener.close()

    started = time.perf_counter()
    for conn in conns:
        conn.settimeout(io_timeout_s)
    try:
        try:
            n_records = count_data_rows(job.dataset_path, job.schema)
            partitions = make_partitions(n_records, k)
        except ValueError as exc:
            raise DatasetError(str(exc)) from exc
        # Assignment log: raw-row ranges are disjoint and cover the file, so
        # intersecting them with the shared split covers the train set exactly.
        core.train_test_split(n_records, job.split_ratio, job.split_seed)
        assert partitions[0].row_start == 0 and partitions[-1].row_end == n_records
        for rank, conn in enumerate(conns):
            send_message(conn, Assign(
                dataset_path=str(job.dataset_path),
                schema=job.schema,
                partition=partitions[rank],
                split_seed=job.split_seed,
                split_ratio=job.split_ratio,
            ))
        executor = _RemoteExecutor(conns)
        coefficients, report = _train_and_evaluate(executor, job.train_config,
                                                   job.schema)
    except WorkerFailureError as exc:
        _abort_workers(conns, str(exc))
        raise
    except ParlinError as exc:
        _abort_workers(conns, str(exc))
        raise
    except Exception as exc:
        _abort_workers(conns, f"master internal error: {exc}")
        raise
    wall = max(time.perf_counter() - started, 1e-9)

    _shutdown_workers(conns)
    return JobResult(coefficients=coefficients, eval=report, wall_seconds=wall,
                     environment_label=label, workers_used=k)


# --------------------------------------------------------------------------
# Worker


class _WorkerState:
    """Lazy holder for the worker's assigned rows, split into train/test."""

    def __init__(self):
        self.assign: Assign | None = None
        self.train = None
        self.test = None

    def blocks(self):
        if self.assign is None:
            raise ProtocolError("compute request received before Assign")
        if self.train is None:
            from .data import load_partition

            a = self.assign
            block = load_partition(a.dataset_path, a.schema, a.partition)
            mask = core.split_mask(block.file_rows, a.split_ratio, a.split_seed)
            local = mask[a.partition.row_start:a.partition.row_end]
            self.train = block.select(local)
            self.test = block.select(~local)
            log.info("rank loaded rows [%d, %d): %d train / %d test",
                     a.partition.row_start, a.partition.row_end,
                     len(self.train), len(self.test))
        return self.train, self.test


def _parse_address(address) -> tuple[str, int]:
    if isinstance(address, tuple):
        return address[0], int(address[1])
    host, _, port = str(address).rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"invalid master address: {address!r} (expected HOST:PORT)")
    return host, int(port)


def _connect_with_retry(host: str, port: int, timeout_s: float) -> socket.socket:
    deadline = time.monotonic() + timeout_s
    while True:
        try:
            conn = socket.create_connection((host, port), timeout=5.0)
            _set_nodelay(conn)
            return conn
        except OSError as exc:
            if time.monotonic() > deadline:
                raise ProtocolError(
                    f"cannot reach master at {host}:{port}: {exc}") from exc
            time.sleep(0.05)


def worker_run(master_address, rank: int, *,
               connect_timeout_s: float = 30.0,
               io_timeout_s: float = DEFAULT_IO_TIMEOUT_S) -> int:
    """Serve one job as worker ``rank``; returns the process exit status.

    0 after a clean Shutdown, 2 on any failure (rejected handshake, dataset
    problem, lost master). Requests are handled strictly one at a time.
    """
    host, port = _parse_address(master_address)
    try:
        conn = _connect_with_retry(host, port, connect_timeout_s)
    except ProtocolError as exc:
        log.error("%s", exc)
        return 2

    state = _WorkerState()
    with conn:
        conn.settimeout(io_timeout_s)
        try:
            send_message(conn, Hello(worker_rank=rank))
            ack = recv_message(conn)
        except (ProtocolError, OSError) as exc:
            log.error("handshake with master failed: %s", exc)
            return 2
        if isinstance(ack, Fail):
            log.error("master rejected worker %d: %s", rank, ack.reason)
            return 2
        if not isinstance(ack, HelloAck):
            log.error("unexpected handshake reply: %s", type(ack).__name__)
            return 2
        log.info("worker %d admitted to job %s", rank, ack.job_id)

        while True:
            try:
                msg = recv_message(conn)
            except (ProtocolError, OSError) as exc:
                log.error("lost master: %s", exc)
                return 2
            try:
                if isinstance(msg, Assign):
                    state.assign = msg
                elif isinstance(msg, ComputeGram):
                    train, test = state.blocks()
                    block = train if msg.scope == "train" else test
                    send_message(conn, GramResult(core.compute_gram_partial(block)))
                elif isinstance(msg, ComputeGradient):
                    train, _ = state.blocks()
                    grad, n = core.compute_gradient_partial(train, msg.theta)
                    send_message(conn, GradientResult(grad, n))
                elif isinstance(msg, ComputeSse):
                    _, test = state.blocks()
                    send_message(conn, SseResult(core.sse_block(msg.theta, test),
                                                 len(test)))
                elif isinstance(msg, Shutdown):
                    send_message(conn, Done())
                    log.info("worker %d shutting down cleanly", rank)
                    return 0
                elif isinstance(msg, Fail):
                    log.error("master aborted the job: %s", msg.reason)
                    return 2
                else:
                    send_message(conn, Fail(
                        f"unexpected message {type(msg).__name__}"))
                    return 2
            except (DatasetError, ParlinError) as exc:
                log.error("worker %d failing: %s", rank, exc)
                try:
                    send_message(conn, Fail(str(exc)))
                except OSError:
                    pass
                return 2
            except OSError as exc:
                log.error("worker %d lost master mid-reply: %s", rank, exc)
                return 2


# --------------------------------------------------------------------------
# Standalone


def standalone_run(job: JobSpec, *,
                   environment_label: str = "Standalone") -> JobResult:
    """Run the identical pipeline in-process: load, train, evaluate, time it."""
    if job.expected_workers != 0:
        raise ValueError("standalone_run needs expected_workers == 0")
    validate_header(job.dataset_path, job.schema)
    started = time.perf_counter()
    executor = _LocalExecutor(job)
    coefficients, report = _train_and_evaluate(executor, job.train_config,
                                               job.schema)
    wall = max(time.perf_counter() - started, 1e-9)
    return JobResult(coefficients=coefficients, eval=report, wall_seconds=wall,
                     environment_label=environment_label, workers_used=0)
