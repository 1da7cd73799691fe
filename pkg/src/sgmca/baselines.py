"""Nonnegative matrix factorisation baselines: HALS and sparse NMF."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from sgmca.matops import as_matrix, rng_from_seed

log = logging.getLogger(__name__)

TINY = 1e-16


@dataclass
class NMFResult:
    A: np.ndarray
    S: np.ndarray
    objective: list = field(default_factory=list)  # after each full sweep

    @property
    def iterations(self) -> int:
        return len(self.objective)


def _prepare(X, I):
    X = as_matrix(X, "X")
    if X.shape[0] < I:
        raise ValueError(f"need at least as many channels as sources ({X.shape[0]} < {I})")
    neg = int(np.sum(X < 0))
    if neg:
        log.warning("clipping %d negative data entries to zero", neg)
        X = np.maximum(X, 0.0)
    if not np.any(X):
        raise ValueError("cannot factorise an all-zero matrix")
    return X


def _init(X, I, seed):
    """Uniform nonnegative factors scaled so that ||A S|| == ||X||."""
    rng = rng_from_seed(seed)
    A = rng.random((X.shape[0], I)) + 0.1
    S = rng.random((I, X.shape[1])) + 0.1
    c = np.sqrt(np.linalg.norm(X) / np.linalg.norm(A @ S))
    return A * c, S * c


def _normalize_columns(A, S):
    n = np.linalg.norm(A, axis=0)
    n = np.where(n > 0, n, 1.0)
    return A / n, S * n[:, None]


def hals(X, I: int, iters: int = 500, seed: int = 0, eps: float = TINY) -> NMFResult:
    """Hierarchical alternating least squares for ``min ||X - A S||^2``,
    ``A, S >= 0``.

    Each sweep updates every row of ``S`` then every column of ``A`` in
    closed form, clamped at ``eps``. A factor that collapses is
    re-initialised from the positive part of the current residual.
    """
    X = _prepare(X, I)
    A, S = _init(X, I, seed)
    trace = []
    for _ in range(iters):
        AtX, AtA = A.T @ X, A.T @ A
        for i in range(I):
            if AtA[i, i] <= eps:
                A[:, i] = _revive(X - A @ S, axis=1)
                AtX, AtA = A.T @ X, A.T @ A
            S[i] = np.maximum(eps, S[i] + (AtX[i] - AtA[i] @ S) / AtA[i, i])
        XSt, SSt = X @ S.T, S @ S.T
        for i in range(I):
            if SSt[i, i] <= eps:
                S[i] = _revive(X - A @ S, axis=0)
                XSt, SSt = X @ S.T, S @ S.T
            A[:, i] = np.maximum(eps, A[:, i] + (XSt[:, i] - A @ SSt[:, i]) / SSt[i, i])
        A, S = _normalize_columns(A, S)
        trace.append(float(np.sum((X - A @ S) ** 2)))
    return NMFResult(A, S, trace)


def _revive(R, axis):
    """Positive part of the residual summed along ``axis``, or ones."""
    v = np.maximum(R, 0.0).sum(axis=axis)
    return v if np.any(v > 0) else np.ones_like(v)


def snmf_objective(X, A, S, lam):
    return float(np.sum((X - A @ S) ** 2) + lam * np.sum(np.abs(S)))


def snmf(X, I: int, iters: int = 500, lam: float = 1e-7, seed: int = 0) -> NMFResult:
    """Sparse NMF, ``min ||X - A S||^2 + lam ||S||_1`` with ``A, S >= 0`` and
    unit-norm columns of ``A`` (without that constraint the penalty is
    dodged by growing ``A``).

    Multiplicative updates; the ``A`` step follows the gradient with
    respect to the normalised basis and is renormalised afterwards:

        S <- S * (A'X) / (A'A S + lam/2)
        A <- A * (X S' + A diag(A' A S S')) / (A S S' + A diag(A' X S'))

    The traced objective is evaluated on the normalised iterate. A source
    row that reaches zero keeps its previous spectrum.
    """
    X = _prepare(X, I)
    A, S = _normalize_columns(*_init(X, I, seed))
    trace = []
    for _ in range(iters):
        S *= (A.T @ X) / np.maximum(A.T @ (A @ S) + lam / 2.0, TINY)
        XSt, LSt = X @ S.T, A @ (S @ S.T)
        A_new = A * (XSt + A * np.sum(LSt * A, axis=0)) / np.maximum(
            LSt + A * np.sum(XSt * A, axis=0), TINY)
        n = np.linalg.norm(A_new, axis=0)
        live = n > 0
        A[:, live] = A_new[:, live] / n[live]
        trace.append(snmf_objective(X, A, S, lam))
    return NMFResult(A, S, trace)
