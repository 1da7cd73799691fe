"""Separation quality: SAD for spectra, BSS-eval ratios for sources, and
permutation/scale alignment of an estimate against the ground truth.

All dB values are clamped to [-120, 120] so that perfect estimates remain
finite and serialisable.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

log = logging.getLogger(__name__)

DB_CAP = 120.0
MIN_ANGLE = 1e-12  # rad; -10 log10(1e-12) == DB_CAP


def _ratio_db(num, den):
    if den <= 0.0:
        return DB_CAP
    if num <= 0.0:
        return -DB_CAP
    return float(np.clip(10.0 * np.log10(num / den), -DB_CAP, DB_CAP))


def sad(a_est, a_true) -> float:
    """Spectral angular distance in dB, ``-10 log10(angle)``."""
    a_est = np.asarray(a_est, dtype=np.float64)
    a_true = np.asarray(a_true, dtype=np.float64)
    ne, nt = np.linalg.norm(a_est), np.linalg.norm(a_true)
    if ne == 0.0 or nt == 0.0:
        raise ValueError("SAD is undefined for a zero spectrum")
    u, v = a_est / ne, a_true / nt
    # arccos of the cosine, evaluated without cancellation near 0 and pi
    angle = 2.0 * np.arctan2(np.linalg.norm(u - v), np.linalg.norm(u + v))
    angle = max(float(angle), MIN_ANGLE)
    return -10.0 * np.log10(angle)


def align(A_est, S_est, A_true, S_true) -> tuple:
    """Permute and rescale ``(A_est, S_est)`` onto the truth.

    The permutation maximises the summed absolute cosine similarity between
    estimated and true sources. Each aligned source is then scaled by its
    least-squares fit to the true one, and the matching column of ``A`` by
    the inverse, so ``A S`` is unchanged.

    Returns ``(A, S, perm, scales)`` where ``perm[i]`` is the estimated
    index matched to true source ``i``.
    """
    A_est = np.asarray(A_est, dtype=np.float64)
    S_est = np.asarray(S_est, dtype=np.float64)
    S_true = np.asarray(S_true, dtype=np.float64)
    if S_est.shape != S_true.shape or A_est.shape != np.shape(A_true):
        raise ValueError("estimate and truth have different shapes")
    ne = np.linalg.norm(S_est, axis=1)
    nt = np.linalg.norm(S_true, axis=1)
    corr = np.abs(S_true @ S_est.T) / np.outer(np.where(nt > 0, nt, 1), np.where(ne > 0, ne, 1))
    _, perm = linear_sum_assignment(corr, maximize=True)
    S = S_est[perm].copy()
    A = A_est[:, perm].copy()
    scales = np.ones(S.shape[0])
    for i in range(S.shape[0]):
        ee = S[i] @ S[i]
        if ee > 0:
            scales[i] = (S[i] @ S_true[i]) / ee
            if scales[i] == 0.0:
                scales[i] = 1.0
    S *= scales[:, None]
    A /= scales[None, :]
    return A, S, perm, scales


def _orth_basis(M, what):
    """Orthonormal basis (rows) of the row space of ``M``; zero rows are
    ignored and genuine rank deficiency triggers a warning."""
    M = M[np.linalg.norm(M, axis=1) > 0]
    if M.shape[0] == 0:
        return np.zeros((0, M.shape[1]))
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    keep = s > s[0] * max(M.shape) * np.finfo(float).eps
    if not np.all(keep):
        warnings.warn(f"{what} basis is rank deficient; using its pseudo-inverse projection",
                      RuntimeWarning, stacklevel=3)
    return Vt[keep]


def _bases(S_true, N_true):
    Bs = _orth_basis(S_true, "source")
    if N_true is None or not np.any(N_true):
        return Bs, Bs
    return Bs, _orth_basis(np.vstack([S_true, np.atleast_2d(N_true)]), "source+noise")


def _decompose(s_est, s_ref, Bs, Bsn):
    rr = s_ref @ s_ref
    target = (s_est @ s_ref / rr) * s_ref if rr > 0 else np.zeros_like(s_est)
    ps = Bs.T @ (Bs @ s_est)
    psn = Bsn.T @ (Bsn @ s_est)
    return target, ps - target, psn - ps, s_est - psn


def _ratios(target, interf, noise, artif):
    e2 = lambda v: float(v @ v)
    return (_ratio_db(e2(target), e2(interf + noise + artif)),
            _ratio_db(e2(target), e2(interf)),
            _ratio_db(e2(target + interf), e2(noise)),
            _ratio_db(e2(target + interf + noise), e2(artif)))


def bss_decompose(s_est, S_true, N_true, index) -> tuple:
    """Orthogonal split ``s_est = target + interf + noise + artif``.

    ``target`` is the projection on the true source, ``interf`` the extra
    part explained by the other true sources, ``noise`` the extra part
    explained by the rows of ``N_true``; ``artif`` is what remains.
    """
    s_est = np.asarray(s_est, dtype=np.float64)
    S_true = np.atleast_2d(np.asarray(S_true, dtype=np.float64))
    Bs, Bsn = _bases(S_true, N_true)
    return _decompose(s_est, S_true[index], Bs, Bsn)


def bss_eval(s_est, S_true, N_true, index) -> tuple:
    """``(sdr, sir, snr, sar)`` in dB for an estimate of true source ``index``."""
    return _ratios(*bss_decompose(s_est, S_true, N_true, index))


@dataclass
class EvalReport:
    sad: np.ndarray
    sdr: np.ndarray
    sir: np.ndarray
    snr: np.ndarray
    sar: np.ndarray
    permutation: np.ndarray
    scales: np.ndarray

    @property
    def sad_overall(self) -> float:
        return float(np.mean(self.sad))

    def as_row(self) -> dict:
        row = {"sad_overall": self.sad_overall}
        for name in ("sad", "sdr", "sir", "snr", "sar"):
            for i, v in enumerate(getattr(self, name), start=1):
                row[f"{name}_{i}"] = float(v)
        return row


def evaluate(A_est, S_est, A_true, S_true, N_true=None) -> EvalReport:
    """Align, then compute SAD per spectrum and BSS-eval ratios per source.

    ``N_true`` is the observed-domain noise (J x P); its rows span the noise
    subspace used by the decomposition.
    """
    A, S, perm, scales = align(A_est, S_est, A_true, S_true)
    A_true = np.asarray(A_true, dtype=np.float64)
    I = S.shape[0]
    sads = np.empty(I)
    for i in range(I):
        sads[i] = sad(A[:, i], A_true[:, i]) if np.any(A[:, i]) else -DB_CAP
    S_true = np.asarray(S_true, dtype=np.float64)
    Bs, Bsn = _bases(S_true, N_true)
    vals = np.array([_ratios(*_decompose(S[i], S_true[i], Bs, Bsn)) for i in range(I)]).T
    return EvalReport(sads, vals[0], vals[1], vals[2], vals[3], perm, scales)
