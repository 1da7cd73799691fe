"""GMCA and semi-blind GMCA (sGMCA) by projected alternating least squares.

Sources are regularised by soft-thresholding their starlet detail
coefficients (the coarse scale is left untouched unless requested).
Mixing-matrix columns are either projected on the unit l2 ball or, for the
columns matched to a learned spectral model, projected on that model's
manifold.

Naming: ``synthesis`` in the starlet module plays the role of the
reconstruction operator; ``interference`` below is the matrix of already
identified spectra subtracted during identification.
"""

from __future__ import annotations

import functools
import itertools
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from sgmca import iae
from sgmca.iae import IAEModel, ProjectionResult
from sgmca.matops import NumericalError, as_matrix, pinv, rng_from_seed, svd
from sgmca.starlet import StarletCoeffs, starlet_forward, starlet_inverse

log = logging.getLogger(__name__)

MAD_TO_SIGMA = 0.6745


# --------------------------------------------------------------------------
# Types
# --------------------------------------------------------------------------


@dataclass
class ThresholdPlan:
    lambdas: np.ndarray  # (n_scales, I, P)
    sigma: np.ndarray  # (n_scales, I)

    def __post_init__(self):
        if np.any(self.lambdas < 0) or not np.all(np.isfinite(self.lambdas)):
            raise ValueError("thresholds must be finite and nonnegative")


@dataclass
class IdentificationMap:
    modeled: list = field(default_factory=list)  # column indices, in order found
    model_of: dict = field(default_factory=dict)  # column -> model index
    mu: list = field(default_factory=list)  # interference weights per step
    interference: np.ndarray | None = None  # (J, k) identified spectra
    sign: dict = field(default_factory=dict)  # column -> +1/-1 orientation chosen at identification

    def __post_init__(self):
        if len(set(self.model_of.values())) != len(self.model_of):
            raise ValueError("each model may be assigned to at most one column")


@dataclass
class SeparationOptions:
    width: int
    height: int
    n_scales: int = 2
    k_mad: float = 3.0
    gmca_iters: int = 100
    gmca_start_percentile: float = 90.0  # first warm-up threshold, per source and scale
    max_iters: int = 50
    eps: float = 1e-6
    reweight: bool = True
    threshold_coarse: bool = False
    init: str = "svd"  # or "random"
    seed: int = 0
    reidentify: bool = False
    grid_step: float = 0.1
    keep_amplitude: bool = False
    proj_max_iters: int = 300
    proj_lr: float = 0.01
    proj_tol: float = 1e-8
    exact_affine: bool = True  # fast projection used by identification
    signed_identification: bool = False  # identification may flip a column's sign
    mixing_domain: str = "details"  # or "pixels"
    noise_estimate: str = "finest"  # or "per_scale"

    def __post_init__(self):
        if self.init not in ("svd", "random"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.noise_estimate not in ("finest", "per_scale"):
            raise ValueError(f"unknown noise estimate {self.noise_estimate!r}")
        if self.mixing_domain not in ("details", "pixels"):
            raise ValueError(f"unknown mixing domain {self.mixing_domain!r}")
        if self.max_iters < 1 or self.gmca_iters < 1:
            raise ValueError("iteration counts must be positive")


@dataclass
class SeparationResult:
    A: np.ndarray
    S: np.ndarray
    ident: IdentificationMap
    iterations: int
    stop_reason: str  # "converged" or "max_iters"
    history: list = field(default_factory=list)
    projections: dict = field(default_factory=dict)  # column -> ProjectionResult
    column_scale: dict = field(default_factory=dict)  # column -> applied amplitude


class NearestNeighborPrior:
    """Benchmark constraint: snap a spectrum to its closest (by angle)
    training spectrum."""

    def __init__(self, spectra, name=""):
        spectra = as_matrix(spectra, "spectra")
        self.spectra = spectra / np.linalg.norm(spectra, axis=1, keepdims=True)
        self.name = name

    def project_batch(self, B):
        B = np.atleast_2d(B)
        idx = np.argmax(B @ self.spectra.T, axis=1)
        U = self.spectra[idx]
        rho = np.maximum(0.0, np.sum(B * U, axis=1))
        proj = rho[:, None] * U
        return idx, rho, proj, np.linalg.norm(B - proj, axis=1)

    def project(self, a) -> ProjectionResult:
        idx, rho, proj, res = self.project_batch(a)
        return ProjectionResult(np.array([1.0]), float(rho[0]), proj[0], float(res[0]),
                                iterations=int(idx[0]))

    def unit_spectrum(self, result: ProjectionResult) -> np.ndarray:
        return self.spectra[result.iterations]


# --------------------------------------------------------------------------
# Source update
# --------------------------------------------------------------------------


def estimate_noise_mad(coeffs) -> np.ndarray:
    """Per-row noise level ``median(|c - median(c)|) / 0.6745``."""
    c = np.atleast_2d(np.asarray(coeffs, dtype=np.float64))
    if c.shape[1] == 0:
        raise ValueError("need at least one coefficient per row")
    med = np.median(c, axis=1, keepdims=True)
    return np.median(np.abs(c - med), axis=1) / MAD_TO_SIGMA


def compute_thresholds(details, sigma, k_mad: float = 3.0, reweight=None) -> ThresholdPlan:
    """Thresholds ``k_mad * sigma`` per source and scale, optionally
    l1-reweighted entrywise as ``t / (1 + |s_prev| / t)``."""
    details = np.asarray(details, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    base = k_mad * np.broadcast_to(sigma[..., None], details.shape)
    if reweight is None:
        return ThresholdPlan(base.copy(), sigma)
    prev = np.abs(np.asarray(reweight, dtype=np.float64))
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(base > 0, base / (1.0 + prev / np.where(base > 0, base, 1.0)), 0.0)
    return ThresholdPlan(lam, sigma)


def soft(x, lam):
    """Entrywise ``max(|x| - lam, 0) * sign(x)``."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - lam, 0.0)


def soft_threshold(coeffs: StarletCoeffs, plan: ThresholdPlan, coarse_lambda=None) -> StarletCoeffs:
    """Soft-threshold the detail scales; the coarse scale passes through
    unless ``coarse_lambda`` is given."""
    if plan.lambdas.shape != coeffs.details.shape:
        raise ValueError("threshold plan does not match the coefficient shape")
    coarse = coeffs.coarse.copy() if coarse_lambda is None else soft(coeffs.coarse, coarse_lambda)
    return StarletCoeffs(soft(coeffs.details, plan.lambdas), coarse, coeffs.width, coeffs.height)


@functools.lru_cache(maxsize=32)
def scale_noise_gains(width: int, height: int, n_scales: int) -> np.ndarray:
    """Standard deviation of each detail scale for unit white noise: the l2
    norm of the scale's response to a centred impulse."""
    impulse = np.zeros((1, width * height))
    impulse[0, (height // 2) * width + width // 2] = 1.0
    d = starlet_forward(impulse, width, height, n_scales).details
    return np.linalg.norm(d[:, 0, :], axis=1)


def noise_levels(details, width, height, mode: str = "finest") -> np.ndarray:
    """Noise level per scale and source, shape (n_scales, sources).

    ``finest``: MAD on the finest scale, carried to coarser scales by the
    white-noise gains. ``per_scale``: MAD on every scale separately.
    """
    details = np.asarray(details, dtype=np.float64)
    if mode == "per_scale":
        return np.array([estimate_noise_mad(d) for d in details])
    if mode != "finest":
        raise ValueError(f"unknown noise estimate {mode!r}")
    gains = scale_noise_gains(width, height, details.shape[0])
    return np.outer(gains / gains[0], estimate_noise_mad(details[0]))


def update_sources(X, A, width, height, n_scales, prev_details=None, k_mad=3.0,
                   plan: ThresholdPlan | None = None, threshold_coarse=False,
                   noise: str = "finest") -> tuple:
    """Least squares ``A^+ X`` followed by starlet soft-thresholding.

    Thresholds are ``k_mad`` times the MAD noise level of each source at each
    scale, reweighted by ``prev_details`` when given; an explicit ``plan``
    overrides them. Returns ``(S, thresholded_details)``.
    """
    S_ls = pinv(A) @ X
    c = starlet_forward(S_ls, width, height, n_scales)
    if plan is None:
        plan = compute_thresholds(c.details, noise_levels(c.details, width, height, noise), k_mad,
                                  prev_details)
    coarse_lam = None
    if threshold_coarse:
        coarse_lam = k_mad * estimate_noise_mad(c.coarse)[:, None]
    ct = soft_threshold(c, plan, coarse_lam)
    return starlet_inverse(ct), ct.details


# --------------------------------------------------------------------------
# Mixing update
# --------------------------------------------------------------------------


def project_unit_ball(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a / max(1.0, float(np.linalg.norm(a)))


def _fast_batch(model, B, exact_affine=False):
    """(rho, projected, residual) for each row of ``B``."""
    if isinstance(model, NearestNeighborPrior):
        _, rho, proj, res = model.project_batch(B)
        return rho, proj, res
    _, rho, proj, res, _ = iae.project_fast_batch(model, B, exact_affine)
    return rho, proj, res


def identify_spectra(A_bar, models, grid_step: float = 0.1, exact_affine: bool = False,
                     signed: bool = False) -> IdentificationMap:
    """Greedy spectrum-to-model matching with interference removal.

    At step ``k`` every free column ``i``, free model ``m`` and weights
    ``mu`` on the grid ``{0, step, ..., 1}^(k-1)`` are scored by
    ``||b - rho P_m(b)||^2`` with ``b = A_bar[:, i] - interference @ mu`` and
    ``P_m`` the fast projection. The winning projection (amplitude
    included) is appended to the interference matrix. With ``signed`` the
    column is also tried with its sign flipped, and the orientation that
    fits is kept in ``sign``.
    """
    A_bar = as_matrix(A_bar, "A_bar")
    J, I = A_bar.shape
    M = len(models)
    if M > I:
        raise ValueError(f"{M} models for only {I} columns")
    norms = np.linalg.norm(A_bar, axis=0)
    free_cols = [i for i in range(I) if norms[i] > 0]
    for i in range(I):
        if norms[i] == 0:
            warnings.warn(f"column {i} of the mixing matrix is zero; not identified",
                          RuntimeWarning, stacklevel=2)
    free_models = list(range(M))
    grid = np.round(np.arange(0.0, 1.0 + grid_step / 2, grid_step), 12)
    interference = np.zeros((J, 0))
    ident = IdentificationMap(interference=interference)

    for k in range(M):
        if not free_cols or not free_models:
            break
        combos = list(itertools.product(grid, repeat=k))
        mus = np.array(combos, dtype=np.float64).reshape(len(combos), k)
        best = (np.inf, None)
        for i, sg in itertools.product(free_cols, (1.0, -1.0) if signed else (1.0,)):
            B = sg * A_bar[:, i][None, :] - mus @ interference.T  # (G, J)
            bn = np.linalg.norm(B, axis=1)
            valid = bn > 1e-12 * norms[i]
            for m in free_models:
                rho, proj, res = _fast_batch(models[m], B, exact_affine)
                err = np.where(valid, res**2, np.inf)
                g = int(np.argmin(err))
                if err[g] < best[0]:
                    best = (err[g], (i, m, mus[g], proj[g], sg))
        if best[1] is None:
            break
        i, m, mu, proj, sg = best[1]
        ident.sign[i] = int(sg)
        interference = np.column_stack([interference, proj])
        ident.modeled.append(i)
        ident.model_of[i] = m
        ident.mu.append(mu)
        free_cols.remove(i)
        free_models.remove(m)
    ident.interference = interference
    return ident


def _sign_fix(A):
    flip = A.sum(axis=0) < 0
    A[:, flip] *= -1.0
    return A


def update_mixing(X, S, models, ident: IdentificationMap | None, opts: SeparationOptions,
                  previous: dict | None = None, A_prev=None) -> tuple:
    """Least squares ``X S^+``, identification when ``ident`` is None, then
    manifold projection of identified columns and unit-ball projection of
    the others. Columns are sign-normalised to a nonnegative sum first.

    Returns ``(A, ident, projections, column_scale)``.
    """
    A_bar = _sign_fix(X @ pinv(S))
    zero = np.linalg.norm(A_bar, axis=0) == 0
    if A_prev is not None and np.any(zero):
        A_bar[:, zero] = A_prev[:, zero]
    if ident is None:
        ident = identify_spectra(A_bar, models, opts.grid_step, opts.exact_affine,
                                 opts.signed_identification) if models else IdentificationMap()
        for i, sg in ident.sign.items():
            A_bar[:, i] *= sg
    A = np.empty_like(A_bar)
    projections, column_scale = {}, {}
    for i in range(A_bar.shape[1]):
        if i in ident.model_of and np.any(A_bar[:, i]):
            model = models[ident.model_of[i]]
            if isinstance(model, NearestNeighborPrior):
                res = model.project(A_bar[:, i])
                unit = model.unit_spectrum(res)
            else:
                init = previous.get(i) if previous else None
                if init is not None and len(init.lam) != model.n_anchors:
                    init = None  # column was matched to another model before
                res = iae.project_manifold(model, A_bar[:, i], opts.proj_max_iters, opts.proj_lr,
                                           opts.proj_tol, init=init)
                unit = iae.generate(model, res.lam)
            scale = res.rho if opts.keep_amplitude else 1.0
            A[:, i] = scale * unit
            projections[i] = res
            column_scale[i] = scale
        else:
            A[:, i] = project_unit_ball(A_bar[:, i])
    return A, ident, projections, column_scale


# --------------------------------------------------------------------------
# Drivers
# --------------------------------------------------------------------------


def _init_mixing(X, I, opts):
    if opts.init == "svd":
        U = svd(X).U[:, :I].copy()
    else:
        U = np.abs(rng_from_seed(opts.seed).standard_normal((X.shape[0], I)))
        U /= np.linalg.norm(U, axis=0)
    return _sign_fix(U)


def _flat_details(details):
    """(n_scales, rows, P) -> (rows, n_scales * P)."""
    return np.concatenate(list(details), axis=1)


def _mixing_data(X, opts):
    if opts.mixing_domain == "pixels":
        return X
    return _flat_details(starlet_forward(X, opts.width, opts.height, opts.n_scales).details)


def _rel_change(new, old):
    n = np.linalg.norm(new)
    return float(np.linalg.norm(new - old) / n) if n > 0 else float("inf")


def _check_data(X, I):
    X = as_matrix(X, "X")
    if X.shape[0] < I:
        raise ValueError(f"need at least as many channels as sources ({X.shape[0]} < {I})")
    if not np.any(X):
        raise NumericalError("data matrix is identically zero")
    return X


def gmca(X, I: int, opts: SeparationOptions) -> SeparationResult:
    """Blind GMCA warm-up.

    Thresholds decay linearly, per source and scale, from a high
    percentile of the absolute detail coefficients to ``k_mad * sigma``
    over ``opts.gmca_iters`` iterations (never below ``k_mad * sigma``).
    The starting percentile is ``opts.gmca_start_percentile``.
    """
    X = _check_data(X, I)
    Xm = _mixing_data(X, opts)
    A = _init_mixing(X, I, opts)
    S = np.zeros((I, X.shape[1]))
    history = []
    n = opts.gmca_iters
    for t in range(n):
        frac = t / (n - 1) if n > 1 else 1.0
        c = starlet_forward(pinv(A) @ X, opts.width, opts.height, opts.n_scales)
        sigma = noise_levels(c.details, opts.width, opts.height, opts.noise_estimate)
        floor = opts.k_mad * sigma
        top = np.percentile(np.abs(c.details), opts.gmca_start_percentile, axis=2)
        thr = np.maximum(floor, (1 - frac) * top + frac * floor)
        plan = ThresholdPlan(np.broadcast_to(thr[..., None], c.details.shape).copy(), sigma)
        ct = soft_threshold(c, plan)
        S_new = starlet_inverse(ct)
        history.append(_rel_change(S_new, S))
        S = S_new
        Sm = S if opts.mixing_domain == "pixels" else _flat_details(ct.details)
        A, _, _, _ = update_mixing(Xm, Sm, [], IdentificationMap(), opts, A_prev=A)
    return SeparationResult(A, S, IdentificationMap(), n, "max_iters", history)


def sgmca(X, I: int, models, opts: SeparationOptions, init: SeparationResult | None = None
          ) -> SeparationResult:
    """Semi-blind GMCA.

    Starts from GMCA (or ``init``), then alternates the thresholded source
    update and the constrained mixing update until the relative change of
    the sources drops to ``opts.eps`` or ``opts.max_iters`` is reached.
    Identification runs on the first iteration and is reused afterwards
    unless ``opts.reidentify`` is set.
    """
    X = _check_data(X, I)
    Xm = _mixing_data(X, opts)
    models = list(models)
    if len(models) > I:
        raise ValueError(f"{len(models)} models for only {I} sources")
    if init is None:
        init = gmca(X, I, opts)
    A = _sign_fix(init.A.copy())
    S = init.S.copy()
    ident = None
    prev_details = None
    projections, column_scale = {}, {}
    history = []
    stop = "max_iters"
    it = 0
    for it in range(1, opts.max_iters + 1):
        S_new, details = update_sources(
            X, A, opts.width, opts.height, opts.n_scales,
            prev_details if opts.reweight else None, opts.k_mad,
            threshold_coarse=opts.threshold_coarse, noise=opts.noise_estimate)
        change = _rel_change(S_new, S)
        S = S_new
        prev_details = details
        Sm = S if opts.mixing_domain == "pixels" else _flat_details(details)
        A, ident, projections, column_scale = update_mixing(
            Xm, Sm, models, None if (ident is None or opts.reidentify) else ident, opts,
            previous=projections, A_prev=A)
        history.append(change)
        log.debug("sgmca iteration %d: relative change %.3e", it, change)
        if change <= opts.eps:
            stop = "converged"
            break
    return SeparationResult(A, S, ident or IdentificationMap(), it, stop, history,
                            projections, column_scale)
