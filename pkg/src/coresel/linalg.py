"""Dense float64 vector/matrix primitives and the shared similarity kernel.

All public operations work on plain numpy arrays: a vector is a 1-D float64
array, a matrix a 2-D row-major float64 array. Conventions pinned here and
relied on everywhere else:

* cosine with a zero-norm operand is 0 (neutral score, never NaN),
* cosine results are clamped into [-1, 1] after the division.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError

__all__ = ["as_vector", "as_matrix", "cosine_similarity", "row_mean", "l2_distance"]


def as_vector(v) -> np.ndarray:
    """Coerce to a 1-D float64 array, rejecting anything else."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {arr.shape}")
    return arr


def as_matrix(m) -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting anything else."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between two equal-length vectors.

    Returns 0.0 when either vector has zero norm; otherwise u.v/(|u||v|)
    clamped into [-1, 1] so rounding can never leave the closed interval.
    """
    u = as_vector(u)
    v = as_vector(v)
    if u.shape[0] != v.shape[0] or u.shape[0] == 0:
        raise DimensionError(
            f"cosine_similarity needs equal nonzero lengths, got {u.shape[0]} and {v.shape[0]}"
        )
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.clip(float(u @ v) / (nu * nv), -1.0, 1.0))


def row_mean(m) -> np.ndarray:
    """Column-wise mean over the rows of a nonempty matrix."""
    m = as_matrix(m)
    if m.shape[0] < 1:
        raise DimensionError("row_mean needs at least one row")
    return m.mean(axis=0)


def l2_distance(u, v) -> float:
    """Euclidean distance between two equal-length vectors."""
    u = as_vector(u)
    v = as_vector(v)
    if u.shape[0] != v.shape[0]:
        raise DimensionError(
            f"l2_distance needs equal lengths, got {u.shape[0]} and {v.shape[0]}"
        )
    return float(np.linalg.norm(u - v))
