"""Small dense linear-algebra kernel shared by every other module.

Matrices are plain 2-D ``float64`` numpy arrays. The SVD is LAPACK's
divide-and-conquer Golub-Kahan routine (via numpy); the pseudoinverse is
built on top of it so the singular-value cutoff is under our control.

Random draws use numpy's ``Generator`` over the PCG64 bit generator,
seeded explicitly. PCG64 is a fixed, documented algorithm, so a given
seed yields the same stream on every platform.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np


class NumericalError(RuntimeError):
    """Raised when a numerical routine cannot produce a usable result."""


class SvdResult(NamedTuple):
    U: np.ndarray
    singular_values: np.ndarray
    Vt: np.ndarray


def as_matrix(m, name="matrix") -> np.ndarray:
    """Validate and convert to a finite 2-D float64 array."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty (shape {arr.shape})")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def svd(m) -> SvdResult:
    """Thin SVD with singular values sorted in descending order."""
    m = as_matrix(m)
    try:
        U, s, Vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"SVD did not converge for a {m.shape[0]}x{m.shape[1]} matrix"
        ) from exc
    return SvdResult(U, s, Vt)


def pinv(m, rcond: float = 1e-12) -> np.ndarray:
    """Moore-Penrose pseudoinverse.

    Singular values at or below ``rcond * s_max`` are treated as zero.
    """
    if not 0.0 < rcond < 1.0:
        raise ValueError(f"rcond must lie in (0, 1), got {rcond}")
    U, s, Vt = svd(m)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((Vt.shape[1], U.shape[0]))
    keep = s > rcond * s[0]
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (Vt.T * s_inv) @ U.T


def rng_from_seed(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def gaussian_matrix(rows: int, cols: int, seed) -> np.ndarray:
    """I.i.d. standard normal matrix drawn from PCG64(seed)."""
    if rows <= 0 or cols <= 0:
        raise ValueError(f"dimensions must be positive, got ({rows}, {cols})")
    return rng_from_seed(seed).standard_normal((rows, cols))
