"""Data-parallel linear regression on a single-master/multi-worker cluster.

Trains over a row-partitioned CSV (normal equations or full-batch gradient
descent), evaluates RMSE on a held-out split, and ships a benchmark harness
for the standalone-vs-cluster strong-scaling experiment.
"""

__version__ = "0.1.0"

from .core import (
    EvalReport,
    GramPartial,
    ModelCoefficients,
    Sample,
    SampleBlock,
    TrainConfig,
    compute_gradient_partial,
    compute_gram_partial,
    gd_step,
    merge_gram,
    predict,
    rmse,
    solve_normal,
    train_test_split,
)
from .cluster import JobResult, JobSpec, master_run, standalone_run, worker_run
from .data import (
    ColumnStats,
    CsvSchema,
    DatasetSpec,
    PartitionSpec,
    column_stats,
    generate_synthetic,
    load_partition,
    make_partitions,
)
from .bench import (
    Environment,
    ExperimentPlan,
    SummaryTable,
    TimingRecord,
    emit_report,
    percent_reduction,
    run_plan,
    summarize,
)

__all__ = [
    "__version__",
    "Sample", "SampleBlock", "GramPartial", "ModelCoefficients", "TrainConfig",
    "EvalReport", "compute_gram_partial", "merge_gram", "solve_normal",
    "compute_gradient_partial", "gd_step", "predict", "rmse", "train_test_split",
    "CsvSchema", "DatasetSpec", "PartitionSpec", "ColumnStats",
    "generate_synthetic", "load_partition", "make_partitions", "column_stats",
    "JobSpec", "JobResult", "master_run", "worker_run", "standalone_run",
    "Environment", "ExperimentPlan", "TimingRecord", "SummaryTable",
    "run_plan", "summarize", "percent_reduction", "emit_report",
]
