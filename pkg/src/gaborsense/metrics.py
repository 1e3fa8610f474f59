"""Sensitivity and evasion metrics plus the descriptive statistics
used in sweep reports.

Model outputs are post-softmax probability vectors, so the l-inf distance
between clean and perturbed predictions lies in [0, 1] and all four
metrics do too. Argmax ties break toward the lowest class index on both
clean and perturbed predictions.
"""

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    EmptyDataset,
    EmptyList,
    EmptyPerturbationSet,
    LengthMismatch,
)
from .oracle import predict_batch
from .perturb import PerturbationField, apply, apply_batch

HISTOGRAM_BINS = 50


def _as_dataset(X) -> np.ndarray:
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.size == 0 or arr.ndim != 4:
        raise EmptyDataset("dataset must contain at least one H x W x C image")
    return arr


def prediction_gaps(clean: np.ndarray, adv: np.ndarray) -> list[float]:
    """Per-row max-abs difference between two prediction stacks."""
    return [float(np.max(np.abs(clean[i] - adv[i]))) for i in range(len(clean))]


def flip_flags(clean: np.ndarray, adv: np.ndarray) -> list[int]:
    """Per-row 0/1 argmax-changed indicator (ties break to lowest index)."""
    return [
        int(np.argmax(clean[i]) != np.argmax(adv[i])) for i in range(len(clean))
    ]


def _index_ordered_mean(values: Sequence[float]) -> float:
    # Index-ordered reduction keeps the result independent of batching
    # and of the degree of parallelism upstream.
    total = 0.0
    for v in values:
        total += v
    return total / len(values)


def universal_sensitivity(oracle, X, s: PerturbationField) -> float:
    """Mean over X of max-abs prediction change under the fixed perturbation s."""
    X = _as_dataset(X)
    clean = predict_batch(oracle, X)
    adv = predict_batch(oracle, apply_batch(X, s))
    return _index_ordered_mean(prediction_gaps(clean, adv))


def universal_evasion(oracle, X, s: PerturbationField) -> float:
    """Fraction of X whose argmax prediction flips under the perturbation s."""
    X = _as_dataset(X)
    clean = predict_batch(oracle, X)
    adv = predict_batch(oracle, apply_batch(X, s))
    return _index_ordered_mean([float(f) for f in flip_flags(clean, adv)])


def average_sensitivity(oracle, x, S: Sequence[PerturbationField]) -> float:
    """Mean over the perturbation set S of the prediction change on one input."""
    if len(S) == 0:
        raise EmptyPerturbationSet("average_sensitivity needs at least one perturbation")
    x = np.asarray(x, dtype=np.float64)
    clean = predict_batch(oracle, [x])[0]
    adv = predict_batch(oracle, [apply(x, s) for s in S])
    return _index_ordered_mean(
        [float(np.max(np.abs(clean - adv[i]))) for i in range(len(S))]
    )


def average_evasion(oracle, x, S: Sequence[PerturbationField]) -> float:
    """Fraction of the perturbation set S that flips the argmax on one input."""
    if len(S) == 0:
        raise EmptyPerturbationSet("average_evasion needs at least one perturbation")
    x = np.asarray(x, dtype=np.float64)
    clean = predict_batch(oracle, [x])[0]
    adv = predict_batch(oracle, [apply(x, s) for s in S])
    return _index_ordered_mean(
        [float(np.argmax(clean) != np.argmax(adv[i])) for i in range(len(S))]
    )


def quartiles(values: Sequence[float]) -> tuple[float, float, float]:
    """Linear-interpolation quantiles at 0.25 / 0.5 / 0.75.

    Sorted values v, index h = (n - 1) * p, result
    v[floor(h)] + (h - floor(h)) * (v[floor(h) + 1] - v[floor(h)]).
    """
    vals = sorted(float(v) for v in values)
    n = len(vals)
    if n == 0:
        raise EmptyList("quartiles of an empty list")
    out = []
    for p in (0.25, 0.5, 0.75):
        h = (n - 1) * p
        lo = int(h)
        if lo + 1 < n:
            out.append(vals[lo] + (h - lo) * (vals[lo + 1] - vals[lo]))
        else:
            out.append(vals[lo])
    return out[0], out[1], out[2]


@dataclass(frozen=True)
class CorrelationResult:
    """Pearson matrix with per-entry validity flags.

    matrix[i][j] is NaN wherever defined[i][j] is False (a zero-variance
    column makes every pairing with it undefined except its own diagonal,
    which is fixed to 1).
    """

    labels: tuple[str, ...]
    matrix: np.ndarray
    defined: np.ndarray


def pearson_correlation_matrix(
    columns: Mapping[str, Sequence[float]]
) -> CorrelationResult:
    """Standard Pearson r per column pair; diagonal fixed to 1."""
    labels = tuple(columns.keys())
    if not labels:
        raise EmptyList("no columns given")
    data = [np.asarray(columns[k], dtype=np.float64) for k in labels]
    n = data[0].shape[0]
    if n < 2:
        raise LengthMismatch("columns need length >= 2")
    for k, col in zip(labels, data):
        if col.ndim != 1 or col.shape[0] != n:
            raise LengthMismatch(f"column {k!r} length {col.shape} != {n}")
    centered = [col - col.mean() for col in data]
    norms = [float(np.sqrt(np.dot(c, c))) for c in centered]
    m = len(labels)
    matrix = np.full((m, m), np.nan, dtype=np.float64)
    defined = np.zeros((m, m), dtype=bool)
    for i in range(m):
        matrix[i, i] = 1.0
        defined[i, i] = True
        for j in range(i + 1, m):
            if norms[i] > 0.0 and norms[j] > 0.0:
                r = float(np.dot(centered[i], centered[j]) / (norms[i] * norms[j]))
                matrix[i, j] = matrix[j, i] = r
                defined[i, j] = defined[j, i] = True
    return CorrelationResult(labels=labels, matrix=matrix, defined=defined)


def histogram(
    values: Sequence[float],
    bins: int = HISTOGRAM_BINS,
    value_range: tuple[float, float] = (0.0, 1.0),
) -> list[int]:
    """Equal-width counts, bins left-closed right-open, final bin closed."""
    lo, hi = value_range
    if bins < 1 or not hi > lo:
        raise ValueError("histogram needs bins >= 1 and a nonempty range")
    counts = [0] * bins
    width = (hi - lo) / bins
    for v in values:
        v = float(v)
        if v < lo or v > hi:
            raise ValueError(f"value {v} outside histogram range [{lo}, {hi}]")
        idx = min(int((v - lo) / width), bins - 1)
        counts[idx] += 1
    return counts


@dataclass(frozen=True)
class MetricSummary:
    """Quartiles plus a fixed-bin histogram of one metric column."""

    q1: float
    q2: float
    q3: float
    histogram: list[int]
    n: int


def summarize(values: Sequence[float]) -> MetricSummary:
    q1, q2, q3 = quartiles(values)
    return MetricSummary(
        q1=q1, q2=q2, q3=q3, histogram=histogram(values), n=len(values)
    )
