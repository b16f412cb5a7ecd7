"""Evaluation metrics over the task-accuracy matrix, plus a gradient diagnostic.

The accuracy matrix is lower-triangular: entry (t, i) is the test accuracy on
task i measured after finishing task t, so row t exists only for i <= t.
Average accuracy is a row mean; average forgetting compares each task's peak
accuracy before the final row against its final-row accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, IncompleteMatrixError
from .model import GradSelector, ParamSet, mean_gradient

__all__ = [
    "AccuracyMatrix",
    "average_accuracy",
    "average_forgetting",
    "DiagnosticRow",
    "grad_approx_diagnostic",
]


class AccuracyMatrix:
    """T x T grid holding a_{t,i} for i <= t; unset entries are NaN."""

    def __init__(self, num_tasks: int):
        if num_tasks < 1:
            raise DimensionError(f"matrix needs at least one task, got {num_tasks}")
        self.num_tasks = int(num_tasks)
        self.values = np.full((num_tasks, num_tasks), np.nan)

    def set(self, t: int, i: int, value: float) -> None:
        if not (0 <= i <= t < self.num_tasks):
            raise DimensionError(f"entry ({t}, {i}) outside the lower triangle of T={self.num_tasks}")
        if not (0.0 <= value <= 1.0):
            raise DimensionError(f"accuracy {value} outside [0, 1]")
        self.values[t, i] = float(value)

    def get(self, t: int, i: int) -> float:
        if not (0 <= i <= t < self.num_tasks):
            raise DimensionError(f"entry ({t}, {i}) outside the lower triangle of T={self.num_tasks}")
        v = self.values[t, i]
        if np.isnan(v):
            raise IncompleteMatrixError(f"entry ({t}, {i}) was never filled")
        return float(v)

    def row(self, t: int) -> np.ndarray:
        """Entries a_{t,0..t}; raises if any is missing."""
        if not 0 <= t < self.num_tasks:
            raise DimensionError(f"row {t} outside 0..{self.num_tasks - 1}")
        values = self.values[t, : t + 1]
        if np.isnan(values).any():
            missing = int(np.flatnonzero(np.isnan(values))[0])
            raise IncompleteMatrixError(f"row {t} is missing entry for task {missing}")
        return values.copy()


def average_accuracy(matrix: AccuracyMatrix, t: int) -> float:
    """A_t: mean accuracy over tasks 0..t after finishing task t."""
    return float(matrix.row(t).mean())


def average_forgetting(matrix: AccuracyMatrix) -> float:
    """F: mean over earlier tasks of (peak accuracy before the final row) - (final accuracy).

    A single-task matrix has nothing to forget; 0 by convention.
    """
    T = matrix.num_tasks
    if T == 1:
        matrix.row(0)  # still insist the run produced its one entry
        return 0.0
    final = matrix.row(T - 1)
    total = 0.0
    for i in range(T - 1):
        peak = max(matrix.get(t, i) for t in range(i, T - 1))
        total += peak - final[i]
    return total / (T - 1)


@dataclass(frozen=True)
class DiagnosticRow:
    batch_size: int
    mean_l2: float
    mean_cosine: float
    cross_l2: float | None
    cross_cosine: float | None

    def as_dict(self) -> dict:
        out = {"batch_size": self.batch_size, "mean_l2": self.mean_l2, "mean_cosine": self.mean_cosine}
        if self.cross_l2 is not None:
            out["cross_l2"] = self.cross_l2
            out["cross_cosine"] = self.cross_cosine
        return out


def _full_mean_gradient(params: ParamSet, x, y, selector, chunk: int = 2048) -> np.ndarray:
    """Whole-dataset mean loss gradient, accumulated in fixed-size chunks."""
    n = x.shape[0]
    total = None
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        g = mean_gradient(params, x[start:stop], y[start:stop], selector) * (stop - start)
        total = g if total is None else total + g
    return total / n


def grad_approx_diagnostic(
    params: ParamSet,
    dataset,
    batch_sizes,
    *,
    n_batches: int = 20,
    seed: int = 0,
    other_dataset=None,
    selector: GradSelector | None = None,
) -> list[DiagnosticRow]:
    """How well random-batch mean gradients approximate the full-dataset one.

    For each batch size, over `n_batches` seeded uniform batches: the mean l2
    distance and cosine similarity between the batch gradient and the
    full-dataset gradient; when `other_dataset` is given, the same figures
    against that dataset's full gradient for contrast. A batch size >= the
    dataset uses the whole dataset once.
    """
    from .linalg import cosine_similarity, l2_distance

    x, y = dataset.x, dataset.y
    n = x.shape[0]
    full = _full_mean_gradient(params, x, y, selector)
    cross_full = None
    if other_dataset is not None:
        cross_full = _full_mean_gradient(params, other_dataset.x, other_dataset.y, selector)

    rows = []
    for b_idx, batch_size in enumerate(batch_sizes):
        batch_size = int(batch_size)
        if batch_size < 1:
            raise DimensionError(f"batch size must be >= 1, got {batch_size}")
        l2s, cosines, cross_l2s, cross_cosines = [], [], [], []
        draws = 1 if batch_size >= n else n_batches
        for k in range(draws):
            if batch_size >= n:
                idx = np.arange(n)
            else:
                rng = np.random.default_rng(np.random.SeedSequence([int(seed), b_idx, k]))
                idx = rng.choice(n, size=batch_size, replace=False)
            g = mean_gradient(params, x[idx], y[idx], selector)
            l2s.append(l2_distance(g, full))
            cosines.append(cosine_similarity(g, full))
            if cross_full is not None:
                cross_l2s.append(l2_distance(g, cross_full))
                cross_cosines.append(cosine_similarity(g, cross_full))
        rows.append(
            DiagnosticRow(
                batch_size=batch_size,
                mean_l2=float(np.mean(l2s)),
                mean_cosine=float(np.mean(cosines)),
                cross_l2=float(np.mean(cross_l2s)) if cross_l2s else None,
                cross_cosine=float(np.mean(cross_cosines)) if cross_cosines else None,
            )
        )
    return rows
