"""Synthetic flight-delay data, CSV ingest, partitioning, and column statistics.

The CSV dialect is deliberately rigid: UTF-8, LF line endings, a mandatory
header that must match the schema byte for byte, and '.'-decimal reals
written with round-trip-exact ``repr`` formatting.
"""

from __future__ import annotations

import csv
import io
import math
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import SampleBlock
from .errors import ConstantColumnError, DatasetError, SchemaError

__all__ = [
    "FLIGHT_FEATURES",
    "CsvSchema",
    "DatasetSpec",
    "PartitionSpec",
    "ColumnStats",
    "GeneratorSummary",
    "generate_synthetic",
    "load_partition",
    "count_data_rows",
    "validate_header",
    "make_partitions",
    "column_stats",
]

GENERATOR_CHUNK = 65536

FLIGHT_FEATURES = (
    "day_of_week",
    "month",
    "scheduled_departure_hour",
    "distance_miles",
    "carrier_index",
    "origin_congestion_score",
    "weather_severity_score",
    "days_to_holiday",
)

# Default ground-truth model for the 8-column flight schema (minutes per unit).
FLIGHT_TRUE_INTERCEPT = -4.0
FLIGHT_TRUE_WEIGHTS = (0.9, -0.35, 1.6, 0.004, 0.75, 14.0, 6.5, -0.12)


@dataclass(frozen=True)
class CsvSchema:
    """Ordered feature columns followed by the real-valued target column."""

    feature_columns: tuple[str, ...]
    target_column: str = "delay_minutes"

    def __post_init__(self):
        object.__setattr__(self, "feature_columns", tuple(self.feature_columns))
        names = self.header()
        if len(set(names)) != len(names):
            raise ValueError("schema column names must be unique")
        if not self.feature_columns:
            raise ValueError("schema needs at least one feature column")

    @property
    def n_features(self) -> int:
        return len(self.feature_columns)

    def header(self) -> list[str]:
        return [*self.feature_columns, self.target_column]

    def header_line(self) -> str:
        return ",".join(self.header())

    def to_json_obj(self) -> dict:
        return {"feature_columns": list(self.feature_columns),
                "target_column": self.target_column}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "CsvSchema":
        return cls(tuple(obj["feature_columns"]), str(obj["target_column"]))


def _default_weights(n_features: int) -> tuple[float, ...]:
    if n_features == len(FLIGHT_FEATURES):
        return FLIGHT_TRUE_WEIGHTS
    return tuple(((-1.0) ** j) * (0.5 + 0.1 * j) for j in range(n_features))


@dataclass(frozen=True)
class DatasetSpec:
    """Parameters of the synthetic generator; defaults mirror the flight dataset."""

    n_records: int = 2_702_218
    n_features: int = 8
    true_intercept: float = FLIGHT_TRUE_INTERCEPT
    true_weights: tuple[float, ...] | None = None
    noise_sigma: float = 13.149
    seed: int = 0

    def __post_init__(self):
        if self.n_records < 2:
            raise ValueError("n_records must be >= 2")
        if self.n_features < 1:
            raise ValueError("n_features must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        weights = self.true_weights
        if weights is None:
            weights = _default_weights(self.n_features)
        weights = tuple(float(w) for w in weights)
        if len(weights) != self.n_features:
            raise ValueError(
                f"true_weights has {len(weights)} entries, expected {self.n_features}")
        object.__setattr__(self, "true_weights", weights)

    def schema(self) -> CsvSchema:
        if self.n_features == len(FLIGHT_FEATURES):
            return CsvSchema(FLIGHT_FEATURES)
        return CsvSchema(tuple(f"feature_{j}" for j in range(self.n_features)))

    def coefficients_vector(self) -> np.ndarray:
        return np.concatenate(([self.true_intercept], self.true_weights))

    def to_json_obj(self) -> dict:
        return {
            "n_records": self.n_records,
            "n_features": self.n_features,
            "true_intercept": self.true_intercept,
            "true_weights": list(self.true_weights),
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class PartitionSpec:
    """Contiguous half-open row range [row_start, row_end) owned by one worker."""

    partition_id: int
    row_start: int
    row_end: int

    def __post_init__(self):
        if self.partition_id < 0:
            raise ValueError("partition_id must be >= 0")
        if not self.row_start < self.row_end:
            raise ValueError("row_start must be < row_end")

    @property
    def n_rows(self) -> int:
        return self.row_end - self.row_start

    def to_json_obj(self) -> dict:
        return {"partition_id": self.partition_id, "row_start": self.row_start,
                "row_end": self.row_end}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "PartitionSpec":
        return cls(int(obj["partition_id"]), int(obj["row_start"]), int(obj["row_end"]))


@dataclass(frozen=True)
class ColumnStats:
    """Per-feature mean and population stddev over the train split."""

    mean: np.ndarray
    std: np.ndarray


@dataclass(frozen=True)
class GeneratorSummary:
    """What the generator wrote: row count, path, CRC-32 of the bytes, seed."""

    rows: int
    path: str
    checksum: int
    seed: int

    def to_json_obj(self) -> dict:
        return {"rows": self.rows, "path": self.path, "checksum": self.checksum,
                "seed": self.seed}


def _draw_flight_features(rng: np.random.Generator, m: int) -> np.ndarray:
    cols = [
        rng.integers(1, 8, m).astype(np.float64),          # day_of_week
        rng.integers(1, 13, m).astype(np.float64),         # month
        rng.integers(0, 24, m).astype(np.float64),         # scheduled_departure_hour
        np.maximum(rng.normal(1150.0, 480.0, m), 67.0),    # distance_miles
        rng.integers(0, 16, m).astype(np.float64),         # carrier_index
        rng.uniform(0.0, 1.0, m),                          # origin_congestion_score
        np.maximum(rng.normal(1.8, 1.1, m), 0.0),          # weather_severity_score
        rng.integers(0, 46, m).astype(np.float64),         # days_to_holiday
    ]
    return np.column_stack(cols)


def _draw_generic_features(rng: np.random.Generator, m: int, d: int) -> np.ndarray:
    cols = [rng.uniform(0.0, 1.0, m) if j % 2 == 0 else rng.normal(0.0, 1.0, m)
            for j in range(d)]
    return np.column_stack(cols)


def generate_synthetic(spec: DatasetSpec, output_path) -> GeneratorSummary:
    """Write a reproducible synthetic CSV and return its summary.

    Rows are produced in fixed-size chunks so memory stays flat regardless of
    ``spec.n_records``; the byte stream is fully determined by ``spec``.
    """
    path = Path(output_path)
    schema = spec.schema()
    rng = np.random.default_rng(spec.seed)
    weights = np.array(spec.true_weights)
    flight = spec.n_features == len(FLIGHT_FEATURES)

    crc = 0
    rows_written = 0
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            def emit(text: str) -> None:
                nonlocal crc
                fh.write(text)
                crc = zlib.crc32(text.encode("utf-8"), crc)

            emit(schema.header_line() + "\n")
            remaining = spec.n_records
            while remaining > 0:
                m = min(GENERATOR_CHUNK, remaining)
                x = (_draw_flight_features(rng, m) if flight
                     else _draw_generic_features(rng, m, spec.n_features))
                y = spec.true_intercept + x @ weights
                if spec.noise_sigma > 0:
                    y = y + rng.normal(0.0, spec.noise_sigma, m)
                lines = [
                    ",".join(map(repr, feat_row)) + f",{target!r}\n"
                    for feat_row, target in zip(x.tolist(), y.tolist())
                ]
                emit("".join(lines))
                rows_written += m
                remaining -= m
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {path}: {exc}") from exc
    return GeneratorSummary(rows=rows_written, path=str(path), checksum=crc,
                            seed=spec.seed)


def _check_header_bytes(fh, schema: CsvSchema, path: Path) -> None:
    found = fh.readline().rstrip(b"\n")
    expected = schema.header_line().encode("utf-8")
    if found != expected:
        raise SchemaError(
            f"{path}: header mismatch: expected {schema.header_line()!r}, "
            f"found {found.decode('utf-8', 'replace')!r}", row=0)


_SCAN_CHUNK = 1 << 20


def _scan_layout(path: Path, schema: CsvSchema, row_start: int) -> tuple[int | None, int]:
    """One fast binary pass: validate the header byte-for-byte, find the byte
    offset where data row ``row_start`` begins, and count the data rows.

    Returns (start_offset, total_rows); start_offset is None when the file has
    fewer than ``row_start`` rows. Memory stays at one chunk.
    """
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DatasetError(f"cannot open dataset {path}: {exc}") from exc
    with fh:
        _check_header_bytes(fh, schema, path)
        base = fh.tell()
        start_offset = base if row_start == 0 else None
        rows = 0
        last = b"\n"
        while True:
            chunk = fh.read(_SCAN_CHUNK)
            if not chunk:
                break
            in_chunk = chunk.count(b"\n")
            if start_offset is None and rows + in_chunk >= row_start:
                pos = -1
                for _ in range(row_start - rows):
                    pos = chunk.find(b"\n", pos + 1)
                start_offset = base + pos + 1
            rows += in_chunk
            base += len(chunk)
            last = chunk[-1:]
        if last != b"\n":
            rows += 1  # final row without a trailing newline still counts
        return start_offset, rows


def _parse_rows(raw_rows: list[list[str]], schema: CsvSchema, first_row: int,
                path: Path) -> np.ndarray:
    width = schema.n_features + 1
    for offset, cells in enumerate(raw_rows):
        if len(cells) != width:
            raise SchemaError(
                f"{path}: row {first_row + offset} has {len(cells)} fields, "
                f"expected {width}", row=first_row + offset)
    try:
        block = np.array(raw_rows, dtype=np.float64)
    except ValueError:
        block = None
    if block is None or not np.all(np.isfinite(block)):
        # Slow path only to produce a precise row/column report.
        for offset, cells in enumerate(raw_rows):
            for j, cell in enumerate(cells):
                try:
                    value = float(cell)
                except ValueError:
                    value = math.nan
                if not math.isfinite(value):
                    raise SchemaError(
                        f"{path}: row {first_row + offset}, column "
                        f"{schema.header()[j]!r}: not a finite number: {cell!r}",
                        row=first_row + offset, column=schema.header()[j])
        raise SchemaError(f"{path}: malformed numeric data near row {first_row}")
    return block


def load_partition(path, schema: CsvSchema, part: PartitionSpec | None = None) -> SampleBlock:
    """Load rows [row_start, row_end) of a CSV, in file order.

    ``part=None`` loads the whole file. A parse-free binary pass locates the
    partition start and counts the file's data rows (kept on the returned
    block as ``file_rows``); only the requested rows are ever parsed.
    """
    path = Path(path)
    row_start = part.row_start if part is not None else 0
    row_end = part.row_end if part is not None else None

    start_offset, total_rows = _scan_layout(path, schema, row_start)
    if start_offset is None or (row_end is not None and total_rows < row_end):
        wanted = row_end if row_end is not None else row_start
        raise SchemaError(
            f"{path}: row range [{row_start}, {row_end}) out of bounds for "
            f"{total_rows} data rows", row=min(wanted, total_rows))
    n_wanted = (row_end if row_end is not None else total_rows) - row_start

    feats_chunks: list[np.ndarray] = []
    with open(path, "rb") as raw:
        raw.seek(start_offset)
        fh = io.TextIOWrapper(raw, encoding="utf-8", newline="")
        reader = csv.reader(fh)
        pending: list[list[str]] = []
        taken = 0
        while taken < n_wanted:
            try:
                cells = next(reader)
            except StopIteration:
                raise SchemaError(
                    f"{path}: file ended after {row_start + taken} rows, "
                    f"expected {total_rows}", row=row_start + taken) from None
            pending.append(cells)
            taken += 1
            if len(pending) >= GENERATOR_CHUNK:
                feats_chunks.append(
                    _parse_rows(pending, schema, row_start + taken - len(pending), path))
                pending = []
        if pending:
            feats_chunks.append(
                _parse_rows(pending, schema, row_start + taken - len(pending), path))

    width = schema.n_features + 1
    if feats_chunks:
        data = np.concatenate(feats_chunks) if len(feats_chunks) > 1 else feats_chunks[0]
    else:
        data = np.empty((0, width))
    return SampleBlock(data[:, :-1], data[:, -1], file_rows=total_rows)


def count_data_rows(path, schema: CsvSchema) -> int:
    """Validate the header and count data rows with a parse-free binary scan."""
    _, total_rows = _scan_layout(Path(path), schema, 0)
    return total_rows


def validate_header(path, schema: CsvSchema) -> None:
    """Cheap pre-flight check: the file opens and its header matches the schema."""
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DatasetError(f"cannot open dataset {path}: {exc}") from exc
    with fh:
        _check_header_bytes(fh, schema, path)


def make_partitions(n_rows: int, k: int) -> list[PartitionSpec]:
    """Contiguous balanced ranges covering [0, n_rows); earlier ranges get the extra row."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if n_rows < k:
        raise ValueError(f"cannot split {n_rows} rows into {k} partitions")
    base, rem = divmod(n_rows, k)
    parts = []
    start = 0
    for i in range(k):
        size = base + (1 if i < rem else 0)
        parts.append(PartitionSpec(i, start, start + size))
        start += size
    return parts


def column_stats(path, schema: CsvSchema, train_indices) -> ColumnStats:
    """Per-feature mean and population stddev over the given train rows.

    Streams the file once; the train rows are selected by global row index.
    A constant column (exact min == max) is rejected because it cannot be
    standardized.
    """
    train_indices = np.asarray(train_indices, dtype=np.int64)
    if train_indices.size == 0:
        raise ValueError("train_indices must be nonempty")
    block = load_partition(path, schema)
    if int(train_indices.max()) >= len(block):
        raise SchemaError(
            f"{path}: train index {int(train_indices.max())} out of bounds for "
            f"{len(block)} rows")
    x = block.features[train_indices]
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    constant = np.flatnonzero(lo == hi)
    if constant.size:
        name = schema.feature_columns[int(constant[0])]
        raise ConstantColumnError(
            f"{path}: column {name!r} is constant over the train rows",
            column=name)
    mean = x.mean(axis=0)
    std = np.sqrt(np.maximum(np.mean(x * x, axis=0) - mean * mean, 0.0))
    return ColumnStats(mean=mean, std=std)
