"""Numerical core: sufficient statistics, solvers, prediction, and the split.

Everything here is pure and operates on plain values, so the same code path
serves the standalone pipeline, the worker processes, and the tests.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import (
    ConstantColumnError,
    DegenerateSplitError,
    DimensionMismatchError,
    SingularSystemError,
)

__all__ = [
    "Sample",
    "SampleBlock",
    "GramPartial",
    "ModelCoefficients",
    "TrainConfig",
    "EvalReport",
    "compute_gram_partial",
    "merge_gram",
    "solve_normal",
    "compute_gradient_partial",
    "gd_step",
    "predict",
    "rmse",
    "train_test_split",
    "split_mask",
    "gram_column_stats",
    "standardized_gradient",
    "raw_coefficients",
]

RIDGE_FALLBACK_EPSILON = 1e-8


@dataclass(frozen=True, eq=False)
class Sample:
    """One observation: a feature vector and the observed delay in minutes."""

    features: np.ndarray
    target: float

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return self.target == other.target and np.array_equal(self.features, other.features)


class SampleBlock(Sequence[Sample]):
    """A contiguous batch of samples stored column-major for fast math.

    Behaves as a sequence of :class:`Sample` while keeping the data in two
    ndarrays, which is what every numeric routine actually consumes.
    ``file_rows`` records how many data rows the source file held when the
    block came from a partition load (None for in-memory blocks).
    """

    __slots__ = ("features", "targets", "file_rows")

    def __init__(self, features: np.ndarray, targets: np.ndarray,
                 file_rows: int | None = None):
        features = np.asarray(features, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        if features.ndim != 2:
            raise ValueError("features must be a 2-d array")
        if targets.ndim != 1 or targets.shape[0] != features.shape[0]:
            raise ValueError("targets must be a 1-d array with one entry per row")
        self.features = features
        self.targets = targets
        self.file_rows = file_rows

    @classmethod
    def empty(cls, n_features: int) -> "SampleBlock":
        return cls(np.empty((0, n_features)), np.empty(0))

    @classmethod
    def from_samples(cls, samples: Iterable[Sample]) -> "SampleBlock":
        samples = list(samples)
        if not samples:
            return cls.empty(0)
        feats = np.array([np.asarray(s.features, dtype=np.float64) for s in samples])
        targs = np.array([s.target for s in samples], dtype=np.float64)
        return cls(feats, targs)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, index):
        if isinstance(index, slice):
            return SampleBlock(self.features[index], self.targets[index])
        return Sample(self.features[index], float(self.targets[index]))

    def select(self, mask: np.ndarray) -> "SampleBlock":
        """Rows where ``mask`` is True, in original order."""
        return SampleBlock(self.features[mask], self.targets[mask])


@dataclass(frozen=True, eq=False)
class GramPartial:
    """Per-partition sufficient statistics for least squares.

    ``a`` accumulates x'x'^T and ``b`` accumulates y*x' over rows, where
    x' = [1, features...]. Merging partials elementwise makes distributed
    fitting exactly equivalent to a single-machine fit.
    """

    a: np.ndarray
    b: np.ndarray
    n: int
    sum_yy: float

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=np.float64))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=np.float64))
        if self.a.ndim != 2 or self.a.shape[0] != self.a.shape[1]:
            raise ValueError("a must be square")
        if self.b.shape != (self.a.shape[0],):
            raise ValueError("b must match a's dimension")

    @classmethod
    def zero(cls, n_features: int) -> "GramPartial":
        m = n_features + 1
        return cls(np.zeros((m, m)), np.zeros(m), 0, 0.0)

    @property
    def n_features(self) -> int:
        return self.a.shape[0] - 1

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GramPartial):
            return NotImplemented
        return (self.n == other.n and self.sum_yy == other.sum_yy
                and np.array_equal(self.a, other.a) and np.array_equal(self.b, other.b))

    def to_json_obj(self) -> dict:
        return {"a": self.a.tolist(), "b": self.b.tolist(), "n": self.n,
                "sum_yy": self.sum_yy}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "GramPartial":
        return cls(np.array(obj["a"], dtype=np.float64),
                   np.array(obj["b"], dtype=np.float64),
                   int(obj["n"]), float(obj["sum_yy"]))


@dataclass(frozen=True, eq=False)
class ModelCoefficients:
    """Fitted linear model: intercept plus one weight per feature.

    ``ridge_fallback`` flags that the closed-form solve only succeeded after
    the automatic ridge retry; it is solver metadata, not model identity,
    and is excluded from equality.
    """

    intercept: float
    weights: np.ndarray
    ridge_fallback: bool = False

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))

    @property
    def n_features(self) -> int:
        return self.weights.shape[0]

    def as_vector(self) -> np.ndarray:
        """[intercept, weights...] in the intercept-augmented basis."""
        return np.concatenate(([self.intercept], self.weights))

    @classmethod
    def from_vector(cls, vec: np.ndarray, ridge_fallback: bool = False) -> "ModelCoefficients":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(float(vec[0]), vec[1:].copy(), ridge_fallback)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelCoefficients):
            return NotImplemented
        return self.intercept == other.intercept and np.array_equal(self.weights, other.weights)

    def to_json_obj(self) -> dict:
        return {"intercept": self.intercept, "weights": self.weights.tolist()}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ModelCoefficients":
        return cls(float(obj["intercept"]), np.array(obj["weights"], dtype=np.float64))


@dataclass(frozen=True)
class TrainConfig:
    """How to fit: closed-form normal equations or full-batch gradient descent."""

    mode: str = "normal_equations"
    iterations: int = 50
    learning_rate: float = 0.1
    ridge_epsilon: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("normal_equations", "gradient_descent"):
            raise ValueError(f"unknown training mode: {self.mode!r}")
        if self.mode == "gradient_descent":
            if self.iterations < 1:
                raise ValueError("iterations must be >= 1")
            if not self.learning_rate > 0:
                raise ValueError("learning_rate must be > 0")
        if self.ridge_epsilon < 0:
            raise ValueError("ridge_epsilon must be >= 0")


@dataclass(frozen=True)
class EvalReport:
    """RMSE over a test set, with the raw sum of squared errors kept alongside."""

    rmse: float
    n_test: int
    sse: float


def _block_from(samples) -> SampleBlock:
    if isinstance(samples, SampleBlock):
        return samples
    items = list(samples)
    if not items:
        return SampleBlock.empty(0)
    first = np.asarray(items[0].features, dtype=np.float64)
    d = first.shape[0] if first.ndim == 1 else -1
    if first.ndim != 1:
        raise DimensionMismatchError("sample 0 features must be a vector", index=0)
    feats = np.empty((len(items), d))
    targs = np.empty(len(items))
    for i, s in enumerate(items):
        f = np.asarray(s.features, dtype=np.float64)
        if f.shape != (d,):
            raise DimensionMismatchError(
                f"sample {i} has {f.size} features, expected {d}",
                index=i, expected=d, found=int(f.size))
        feats[i] = f
        targs[i] = s.target
    return SampleBlock(feats, targs)


def compute_gram_partial(samples, n_features: int | None = None) -> GramPartial:
    """Accumulate X'^T X', X'^T y, the row count, and sum(y^2) over ``samples``.

    Accepts a :class:`SampleBlock` (fast, vectorized) or any iterable of
    :class:`Sample`. ``n_features`` only disambiguates the empty case. The
    result's ``a`` is bit-exactly symmetric: the upper triangle is computed
    once and mirrored.
    """
    block = _block_from(samples)
    if len(block) == 0:
        return GramPartial.zero(n_features if n_features is not None else block.n_features)
    if n_features is not None and block.n_features != n_features:
        raise DimensionMismatchError(
            f"samples have {block.n_features} features, expected {n_features}",
            expected=n_features, found=block.n_features)

    x, y = block.features, block.targets
    n, d = x.shape
    a = np.zeros((d + 1, d + 1))
    a[0, 0] = float(n)
    a[0, 1:] = x.sum(axis=0)
    a[1:, 1:] = x.T @ x
    a = np.triu(a) + np.triu(a, 1).T
    b = np.empty(d + 1)
    b[0] = y.sum()
    b[1:] = x.T @ y
    return GramPartial(a, b, n, float(y @ y))


def merge_gram(p: GramPartial, q: GramPartial) -> GramPartial:
    """Elementwise sum of two partials over disjoint row sets."""
    if p.a.shape != q.a.shape:
        raise DimensionMismatchError(
            f"cannot merge partials of dimension {p.n_features} and {q.n_features}",
            expected=p.n_features, found=q.n_features)
    return GramPartial(p.a + q.a, p.b + q.b, p.n + q.n, p.sum_yy + q.sum_yy)


def _cho_solve_equilibrated(m: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Jacobi scaling keeps the factorization well conditioned when feature
    # scales span orders of magnitude; the solved system is unchanged.
    s = np.sqrt(np.diag(m))
    s[s == 0.0] = 1.0
    ms = m / np.outer(s, s)
    factor = sla.cho_factor(ms, lower=False, check_finite=False)
    return sla.cho_solve(factor, b / s, check_finite=False) / s


def solve_normal(g: GramPartial, ridge_epsilon: float = 0.0) -> ModelCoefficients:
    """Solve (a + lambda*I) theta = b by Cholesky, lambda = ridge_epsilon*trace(a)/(d+1).

    A factorization failure at lambda = 0 triggers one automatic retry with
    lambda = 1e-8*trace(a)/(d+1), flagged on the result; a second failure
    raises :class:`SingularSystemError`.
    """
    if g.n < 1:
        raise ValueError("cannot solve an empty system (n = 0)")
    m = g.a.shape[0]
    trace = float(np.trace(g.a))
    lam = ridge_epsilon * trace / m

    def attempt(lam_val: float) -> np.ndarray:
        sys_matrix = g.a if lam_val == 0.0 else g.a + lam_val * np.eye(m)
        return _cho_solve_equilibrated(sys_matrix, g.b)

    try:
        theta = attempt(lam)
        fallback = False
    except np.linalg.LinAlgError:
        if lam != 0.0:
            raise SingularSystemError(
                f"normal equations singular at lambda={lam!r}") from None
        try:
            theta = attempt(RIDGE_FALLBACK_EPSILON * trace / m)
            fallback = True
        except np.linalg.LinAlgError:
            raise SingularSystemError(
                "normal equations singular even after ridge fallback") from None
    if not np.all(np.isfinite(theta)):
        raise SingularSystemError("normal-equation solution is not finite")
    return ModelCoefficients.from_vector(theta, ridge_fallback=fallback)


def compute_gradient_partial(samples, theta: ModelCoefficients) -> tuple[np.ndarray, int]:
    """Un-normalized squared-error gradient sum(x'*(x'^T theta - y)) and the row count."""
    block = _block_from(samples)
    if len(block) == 0:
        return np.zeros(theta.n_features + 1), 0
    if block.n_features != theta.n_features:
        raise DimensionMismatchError(
            f"samples have {block.n_features} features, model expects {theta.n_features}",
            expected=theta.n_features, found=block.n_features)
    x, y = block.features, block.targets
    residual = x @ theta.weights + theta.intercept - y
    grad = np.empty(block.n_features + 1)
    grad[0] = residual.sum()
    grad[1:] = x.T @ residual
    return grad, len(block)


def gd_step(theta: ModelCoefficients, grad_sum: np.ndarray, n_total: int,
            lr: float) -> ModelCoefficients:
    """One descent step: theta - lr * grad_sum / n_total."""
    if n_total < 1:
        raise ValueError("n_total must be >= 1")
    vec = theta.as_vector() - lr * np.asarray(grad_sum, dtype=np.float64) / n_total
    return ModelCoefficients.from_vector(vec)


def predict(theta: ModelCoefficients, features) -> float:
    """intercept + dot(weights, features)."""
    f = np.asarray(features, dtype=np.float64)
    if f.shape != (theta.n_features,):
        raise DimensionMismatchError(
            f"features have length {f.size}, model expects {theta.n_features}",
            expected=theta.n_features, found=int(f.size))
    return float(theta.intercept + theta.weights @ f)


def predict_block(theta: ModelCoefficients, block: SampleBlock) -> np.ndarray:
    """Vectorized predictions for every row of a block."""
    if block.n_features != theta.n_features:
        raise DimensionMismatchError(
            f"block has {block.n_features} features, model expects {theta.n_features}",
            expected=theta.n_features, found=block.n_features)
    return block.features @ theta.weights + theta.intercept


def sse_block(theta: ModelCoefficients, block: SampleBlock) -> float:
    """Sum of squared residuals over a block."""
    r = predict_block(theta, block) - block.targets
    return float(r @ r)


def rmse(predictions, observations) -> EvalReport:
    """Root mean squared error between paired sequences."""
    p = np.asarray(predictions, dtype=np.float64)
    o = np.asarray(observations, dtype=np.float64)
    if p.ndim != 1 or o.ndim != 1:
        raise ValueError("predictions and observations must be 1-d")
    if p.size == 0:
        raise ValueError("cannot evaluate rmse on empty input")
    if p.shape != o.shape:
        raise DimensionMismatchError(
            f"length mismatch: {p.size} predictions vs {o.size} observations",
            expected=int(p.size), found=int(o.size))
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(o))):
        raise ValueError("predictions and observations must be finite")
    diff = p - o
    sse = float(diff @ diff)
    return EvalReport(rmse=math.sqrt(sse / p.size), n_test=int(p.size), sse=sse)


def train_test_split(n_records: int, ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle split: first floor(ratio*n) permuted indices train, rest test."""
    if n_records < 2:
        raise ValueError("need at least 2 records to split")
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    n_train = math.floor(ratio * n_records)
    if n_train == 0 or n_train == n_records:
        raise DegenerateSplitError(
            f"split of {n_records} rows at ratio {ratio} leaves an empty side")
    perm = np.random.default_rng(seed).permutation(n_records)
    return perm[:n_train].copy(), perm[n_train:].copy()


def split_mask(n_records: int, ratio: float, seed: int) -> np.ndarray:
    """Boolean row mask over [0, n_records): True where the row is a train row."""
    train_idx, _ = train_test_split(n_records, ratio, seed)
    mask = np.zeros(n_records, dtype=bool)
    mask[train_idx] = True
    return mask


def gram_column_stats(g: GramPartial,
                      column_names: Sequence[str] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and population stddev recovered from a train-set partial.

    Row 0 / column 0 of ``a`` hold plain sums, so the first moments come for
    free; raises :class:`~parlin.errors.ConstantColumnError` when a column
    has zero variance.
    """
    if g.n < 1:
        raise ValueError("cannot derive column stats from an empty partial")
    mean = g.a[0, 1:] / g.n
    second = np.diag(g.a)[1:] / g.n
    var = np.maximum(second - mean * mean, 0.0)
    std = np.sqrt(var)
    zero = np.flatnonzero(std == 0.0)
    if zero.size:
        j = int(zero[0])
        name = column_names[j] if column_names is not None else f"feature {j}"
        raise ConstantColumnError(
            f"column {name!r} is constant on the train split", column=str(name))
    return mean, std


def standardized_gradient(grad_raw: np.ndarray, mean: np.ndarray,
                          std: np.ndarray) -> np.ndarray:
    """Map a raw-feature-space gradient into standardized-feature space.

    Residuals are identical in both spaces, so the chain rule reduces to a
    per-column affine transform of the raw gradient.
    """
    g = np.empty_like(grad_raw)
    g[0] = grad_raw[0]
    g[1:] = (grad_raw[1:] - mean * grad_raw[0]) / std
    return g


def raw_coefficients(theta_std: ModelCoefficients, mean: np.ndarray,
                     std: np.ndarray) -> ModelCoefficients:
    """Convert coefficients fitted on standardized features back to raw units."""
    w = theta_std.weights / std
    b = theta_std.intercept - float(w @ mean)
    return ModelCoefficients(b, w)
