"""Dense vector/matrix helpers with finiteness and shape validation.

Vectors and matrices are plain contiguous float64 ndarrays. The reduction
order contract (ascending index) is honored exactly by the numba backend;
see `backend` for the fallback caveat.
"""

from __future__ import annotations

import numpy as np

from . import backend as K


def check_finite(arr: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.isfinite(arr).all():
        raise ValueError(f"{what} contains non-finite values")
    return arr


def vec(values) -> np.ndarray:
    out = np.ascontiguousarray(values, dtype=np.float64)
    if out.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {out.shape}")
    return check_finite(out, "vector")


def mat(values) -> np.ndarray:
    out = np.ascontiguousarray(values, dtype=np.float64)
    if out.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {out.shape}")
    return check_finite(out, "matrix")


def dot(a, b) -> float:
    a, b = vec(a), vec(b)
    if a.shape != b.shape:
        raise ValueError(f"dot shape mismatch: {a.shape} vs {b.shape}")
    return K.dot(a, b)


def axpy(alpha: float, x, y) -> np.ndarray:
    x, y = vec(x), vec(y)
    if x.shape != y.shape:
        raise ValueError(f"axpy shape mismatch: {x.shape} vs {y.shape}")
    return K.axpy(float(alpha), x, y)


def matvec(a, x) -> np.ndarray:
    a, x = mat(a), vec(x)
    if a.shape[1] != x.shape[0]:
        raise ValueError(f"matvec shape mismatch: {a.shape} @ {x.shape}")
    return K.matvec(a, x)


def mat_t_vec(a, g) -> np.ndarray:
    """A^T g without forming the transpose."""
    a, g = mat(a), vec(g)
    if a.shape[0] != g.shape[0]:
        raise ValueError(f"mat_t_vec shape mismatch: {a.shape}^T @ {g.shape}")
    return K.mat_t_vec(a, g)
