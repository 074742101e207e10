"""Strict JSON configuration: unknown keys are errors, paths are pre-validated.

A config document has up to five sections::

    {
      "dataset": {"spec": {...}} or {"path": "...", "schema": {...}},
      "train":   {"mode", "iterations", "learning_rate", "ridge_epsilon", "seed"},
      "split":   {"ratio", "seed"},
      "cluster": {"port", "expected_workers", "admission_timeout_s"},
      "bench":   {"environments", "repetitions", "output_dir"}
    }

Every section is optional and defaulted; any key outside this shape is
rejected with an error naming the offending key.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .bench import STANDARD_ENVIRONMENTS, Environment, ExperimentPlan
from .cluster import DEFAULT_ADMISSION_TIMEOUT_S, DEFAULT_PORT, JobSpec
from .core import TrainConfig
from .data import CsvSchema, DatasetSpec
from .errors import ConfigError

__all__ = ["Config", "DatasetConfig", "SplitConfig", "ClusterConfig",
           "BenchConfig", "load_config", "job_config_document"]


@dataclass(frozen=True)
class DatasetConfig:
    path: str | None = None
    schema: CsvSchema | None = None
    spec: DatasetSpec | None = None

    def resolved_schema(self) -> CsvSchema:
        if self.schema is not None:
            return self.schema
        if self.spec is not None:
            return self.spec.schema()
        raise ConfigError("config has no dataset schema (set dataset.schema "
                          "or dataset.spec)", key="dataset.schema")

    def resolved_path(self) -> str:
        if self.path is None:
            raise ConfigError("config has no dataset path", key="dataset.path")
        return self.path


@dataclass(frozen=True)
class SplitConfig:
    ratio: float = 0.7
    seed: int = 0


@dataclass(frozen=True)
class ClusterConfig:
    port: int = DEFAULT_PORT
    expected_workers: int = 1
    admission_timeout_s: float = DEFAULT_ADMISSION_TIMEOUT_S


@dataclass(frozen=True)
class BenchConfig:
    environments: tuple[Environment, ...] = STANDARD_ENVIRONMENTS
    repetitions: int = 5
    output_dir: str | None = None


@dataclass(frozen=True)
class Config:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def job_spec(self, expected_workers: int) -> JobSpec:
        return JobSpec(
            dataset_path=self.dataset.resolved_path(),
            schema=self.dataset.resolved_schema(),
            train_config=self.train,
            split_ratio=self.split.ratio,
            split_seed=self.split.seed,
            expected_workers=expected_workers,
        )

    def with_seed(self, seed: int) -> "Config":
        """Apply a global seed override to the split, training, and generator."""
        dataset = self.dataset
        if dataset.spec is not None:
            dataset = dataclasses.replace(
                dataset, spec=dataclasses.replace(dataset.spec, seed=seed))
        return dataclasses.replace(
            self,
            dataset=dataset,
            train=dataclasses.replace(self.train, seed=seed),
            split=dataclasses.replace(self.split, seed=seed),
        )


def _reject_unknown(obj: dict, allowed: tuple[str, ...], context: str) -> None:
    for key in obj:
        if key not in allowed:
            full = f"{context}.{key}" if context else key
            raise ConfigError(f"unknown config key: {full!r}", key=full)


def _typed(obj: dict, key: str, kind, context: str, default):
    if key not in obj:
        return default
    value = obj[key]
    full = f"{context}.{key}"
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"config key {full!r} must be an integer", key=full)
    if not isinstance(value, kind):
        raise ConfigError(f"config key {full!r} has the wrong type "
                          f"(expected {kind.__name__})", key=full)
    return value


def _section(obj: dict, key: str) -> dict:
    value = obj.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(f"config section {key!r} must be an object", key=key)
    return value


def _parse_schema(obj: dict, context: str) -> CsvSchema:
    _reject_unknown(obj, ("feature_columns", "target_column"), context)
    cols = obj.get("feature_columns")
    if (not isinstance(cols, list) or not cols
            or not all(isinstance(c, str) for c in cols)):
        raise ConfigError(f"{context}.feature_columns must be a nonempty list "
                          f"of strings", key=f"{context}.feature_columns")
    target = _typed(obj, "target_column", str, context, "delay_minutes")
    try:
        return CsvSchema(tuple(cols), target)
    except ValueError as exc:
        raise ConfigError(f"invalid {context}: {exc}", key=context) from exc


def _parse_dataset_spec(obj: dict, context: str) -> DatasetSpec:
    allowed = ("n_records", "n_features", "true_intercept", "true_weights",
               "noise_sigma", "seed")
    _reject_unknown(obj, allowed, context)
    weights = obj.get("true_weights")
    if weights is not None:
        if not isinstance(weights, list) or not all(
                isinstance(w, (int, float)) and not isinstance(w, bool)
                for w in weights):
            raise ConfigError(f"{context}.true_weights must be a list of numbers",
                              key=f"{context}.true_weights")
        weights = tuple(float(w) for w in weights)
    defaults = DatasetSpec()
    try:
        return DatasetSpec(
            n_records=_typed(obj, "n_records", int, context, defaults.n_records),
            n_features=_typed(obj, "n_features", int, context, defaults.n_features),
            true_intercept=_typed(obj, "true_intercept", float, context,
                                  defaults.true_intercept),
            true_weights=weights,
            noise_sigma=_typed(obj, "noise_sigma", float, context,
                               defaults.noise_sigma),
            seed=_typed(obj, "seed", int, context, defaults.seed),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid {context}: {exc}", key=context) from exc


def _parse_environments(value, context: str) -> tuple[Environment, ...]:
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{context} must be a nonempty list", key=context)
    envs = []
    for i, item in enumerate(value):
        ctx = f"{context}[{i}]"
        if not isinstance(item, dict):
            raise ConfigError(f"{ctx} must be an object", key=ctx)
        _reject_unknown(item, ("label", "worker_count"), ctx)
        label = _typed(item, "label", str, ctx, None)
        count = _typed(item, "worker_count", int, ctx, None)
        if label is None or count is None:
            raise ConfigError(f"{ctx} needs both label and worker_count", key=ctx)
        try:
            envs.append(Environment(label, count))
        except ValueError as exc:
            raise ConfigError(f"invalid {ctx}: {exc}", key=ctx) from exc
    return tuple(envs)


def parse_config(doc: dict) -> Config:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    _reject_unknown(doc, ("dataset", "train", "split", "cluster", "bench"), "")

    ds = _section(doc, "dataset")
    _reject_unknown(ds, ("path", "schema", "spec"), "dataset")
    dataset = DatasetConfig(
        path=_typed(ds, "path", str, "dataset", None),
        schema=_parse_schema(ds["schema"], "dataset.schema") if "schema" in ds else None,
        spec=_parse_dataset_spec(ds["spec"], "dataset.spec") if "spec" in ds else None,
    )
    if dataset.spec is None and dataset.path is None:
        raise ConfigError("config needs a dataset section with spec or path",
                          key="dataset")

    tr = _section(doc, "train")
    _reject_unknown(tr, ("mode", "iterations", "learning_rate", "ridge_epsilon",
                         "seed"), "train")
    defaults = TrainConfig()
    try:
        train = TrainConfig(
            mode=_typed(tr, "mode", str, "train", defaults.mode),
            iterations=_typed(tr, "iterations", int, "train", defaults.iterations),
            learning_rate=_typed(tr, "learning_rate", float, "train",
                                 defaults.learning_rate),
            ridge_epsilon=_typed(tr, "ridge_epsilon", float, "train",
                                 defaults.ridge_epsilon),
            seed=_typed(tr, "seed", int, "train", defaults.seed),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid train section: {exc}", key="train") from exc

    sp = _section(doc, "split")
    _reject_unknown(sp, ("ratio", "seed"), "split")
    split = SplitConfig(ratio=_typed(sp, "ratio", float, "split", 0.7),
                        seed=_typed(sp, "seed", int, "split", 0))
    if not 0.0 < split.ratio < 1.0:
        raise ConfigError("split.ratio must lie strictly between 0 and 1",
                          key="split.ratio")

    cl = _section(doc, "cluster")
    _reject_unknown(cl, ("port", "expected_workers", "admission_timeout_s"),
                    "cluster")
    cluster = ClusterConfig(
        port=_typed(cl, "port", int, "cluster", DEFAULT_PORT),
        expected_workers=_typed(cl, "expected_workers", int, "cluster", 1),
        admission_timeout_s=_typed(cl, "admission_timeout_s", float, "cluster",
                                   DEFAULT_ADMISSION_TIMEOUT_S),
    )

    be = _section(doc, "bench")
    _reject_unknown(be, ("environments", "repetitions", "output_dir"), "bench")
    bench = BenchConfig(
        environments=(_parse_environments(be["environments"], "bench.environments")
                      if "environments" in be else STANDARD_ENVIRONMENTS),
        repetitions=_typed(be, "repetitions", int, "bench", 5),
        output_dir=_typed(be, "output_dir", str, "bench", None),
    )
    if bench.repetitions < 1:
        raise ConfigError("bench.repetitions must be >= 1", key="bench.repetitions")

    return Config(dataset=dataset, train=train, split=split, cluster=cluster,
                  bench=bench)


def load_config(path) -> Config:
    """Load and strictly validate a config file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return parse_config(doc)


def job_config_document(plan: ExperimentPlan) -> dict:
    """Config document handed to spawned node processes by the bench runner."""
    job = plan.job
    return {
        "dataset": {
            "path": str(job.dataset_path),
            "schema": job.schema.to_json_obj(),
        },
        "train": {
            "mode": job.train_config.mode,
            "iterations": job.train_config.iterations,
            "learning_rate": job.train_config.learning_rate,
            "ridge_epsilon": job.train_config.ridge_epsilon,
            "seed": job.train_config.seed,
        },
        "split": {"ratio": job.split_ratio, "seed": job.split_seed},
        "cluster": {"port": plan.port,
                    "admission_timeout_s": plan.admission_timeout_s},
    }
