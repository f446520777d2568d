"""Dense real-matrix helpers shared by every other module.

Matrices are plain ``np.ndarray`` objects (float64, 2-D, row-major). The
functions here validate inputs and raise the package errors instead of
letting numpy produce NaNs further down the pipeline.
"""
from typing import Optional, Tuple

import numpy as np

from ..errors import InvalidMatrix, InvalidSpec, ShapeError

SYMMETRY_TOL = 1e-10


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a finite float64 2-D array."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise InvalidMatrix(f"{name} must be 2-D, got shape {m.shape}")
    if m.size == 0:
        raise InvalidMatrix(f"{name} must be non-empty")
    if not np.all(np.isfinite(m)):
        raise InvalidMatrix(f"{name} contains non-finite entries")
    return m


def default_rel_tol(shape: Tuple[int, int]) -> float:
    return 1e-12 * max(shape)


def _cutoff(s: np.ndarray, rel_tol: float) -> float:
    return rel_tol * (s[0] if s.size else 0.0)


def pseudo_inverse_with_rank(m, rel_tol: Optional[float] = None) -> Tuple[np.ndarray, int]:
    """Pseudoinverse and the number of singular values it kept, from one SVD."""
    m = as_matrix(m)
    if rel_tol is None:
        rel_tol = default_rel_tol(m.shape)
    if not rel_tol > 0:
        raise InvalidSpec(f"rel_tol must be positive, got {rel_tol}")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    keep = s > _cutoff(s, rel_tol)
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (vt.T * s_inv) @ u.T, int(np.count_nonzero(keep))


def pseudo_inverse(m, rel_tol: Optional[float] = None) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD.

    Singular values below ``rel_tol * sigma_max`` are treated as zero.
    """
    return pseudo_inverse_with_rank(m, rel_tol)[0]


def numerical_rank(m, rel_tol: Optional[float] = None) -> int:
    """Number of singular values kept by :func:`pseudo_inverse`."""
    m = as_matrix(m)
    if rel_tol is None:
        rel_tol = default_rel_tol(m.shape)
    if not rel_tol > 0:
        raise InvalidSpec(f"rel_tol must be positive, got {rel_tol}")
    s = np.linalg.svd(m, compute_uv=False)
    return int(np.count_nonzero(s > _cutoff(s, rel_tol)))


def sym_eig_extremes(m) -> Tuple[float, float]:
    """Smallest and largest eigenvalue of a symmetric matrix."""
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise InvalidMatrix(f"Expected a square matrix, got shape {m.shape}")
    asym = np.linalg.norm(m - m.T)
    if asym > SYMMETRY_TOL * max(1.0, np.linalg.norm(m)):
        raise InvalidMatrix(f"Matrix is not symmetric (||M - M^T||_F = {asym:.3e})")
    eigs = np.linalg.eigvalsh(0.5 * (m + m.T))
    return float(eigs[0]), float(eigs[-1])


def frobenius_inner(a, b) -> float:
    """Trace inner product <a, b> = sum_ij a_ij b_ij."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"Shape mismatch: {a.shape} vs {b.shape}")
    return float(np.vdot(a, b))


def frobenius_norm_sq(a) -> float:
    return frobenius_inner(a, a)


def vec(w: np.ndarray) -> np.ndarray:
    """Row-major flattening of a parameter matrix."""
    return np.ascontiguousarray(w).reshape(-1)


def unvec(x: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`vec`."""
    x = np.asarray(x, dtype=np.float64)
    if x.size != shape[0] * shape[1]:
        raise ShapeError(f"Cannot reshape {x.size} entries into {shape}")
    return x.reshape(shape)
