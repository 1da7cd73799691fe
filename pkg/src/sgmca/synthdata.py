"""Synthetic spectra, spatial templates and noisy mixtures.

Three parametric spectrum families stand in for the X-ray emission models:

* ``gaussian_line``: one Gaussian line whose width is proportional to its
  center (one free parameter);
* ``powerlaw``: an absorbed power law (index, absorption);
* ``thermal_proxy``: an absorbed exponential continuum plus a fixed, seeded
  set of narrow emission lines (continuum shape, line strength).

Channels are indexed ``j = 1..J``. Every generated spectrum is nonnegative
with unit l2 norm.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sgmca.matops import gaussian_matrix, rng_from_seed

KINDS = ("gaussian_line", "powerlaw", "thermal_proxy")


def _unit(v):
    v = np.maximum(np.asarray(v, dtype=np.float64), 0.0)
    n = np.linalg.norm(v)
    if n == 0 or not np.isfinite(n):
        raise ValueError("generated spectrum is degenerate")
    return v / n


def gen_gaussian_line(center: float, width_factor: float, n_channels: int) -> np.ndarray:
    if not 0 < center < n_channels:
        raise ValueError(f"center {center} outside (0, {n_channels})")
    if width_factor <= 0:
        raise ValueError("width_factor must be positive")
    j = np.arange(1, n_channels + 1, dtype=np.float64)
    width = width_factor * center
    return _unit(np.exp(-((j - center) ** 2) / (2.0 * width**2)))


def gen_powerlaw(index: float, absorption: float, n_channels: int) -> np.ndarray:
    x = np.arange(1, n_channels + 1, dtype=np.float64) / n_channels
    return _unit(x ** (-index) * np.exp(-absorption / x**3))


def _thermal_lines(line_seed, n_channels, n_lines=4):
    rng = rng_from_seed([line_seed, 99])
    centers = np.sort(rng.uniform(0.3, 0.85, n_lines)) * n_channels
    amps = rng.uniform(0.3, 1.0, n_lines)
    return centers, amps


def gen_thermal_proxy(temperature_like: float, line_strength: float, n_channels: int,
                      line_seed: int = 0, absorption: float = 3e-3,
                      line_width: float = 0.8) -> np.ndarray:
    """Absorbed exponential continuum ``exp(-x/T) exp(-absorption/x^3) / sqrt(x)``
    plus lines at seeded positions, scaled by ``line_strength`` relative to
    the continuum peak."""
    if temperature_like <= 0:
        raise ValueError("temperature_like must be positive")
    if line_strength < 0:
        raise ValueError("line_strength must be nonnegative")
    j = np.arange(1, n_channels + 1, dtype=np.float64)
    x = j / n_channels
    cont = np.exp(-x / temperature_like) * np.exp(-absorption / x**3) / np.sqrt(x)
    cont = cont / cont.max()
    centers, amps = _thermal_lines(line_seed, n_channels)
    lines = sum(a * np.exp(-((j - c) ** 2) / (2 * line_width**2)) for c, a in zip(centers, amps))
    return _unit(cont + line_strength * lines)


@dataclass
class SpectrumFamily:
    """A parametric family of spectra with a box of parameter ranges."""

    kind: str
    n_channels: int
    ranges: tuple = ()
    width_factor: float = 0.15
    line_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown spectrum family {self.kind!r}")
        if not self.ranges:
            self.ranges = default_ranges(self.kind, self.n_channels)
        self.ranges = tuple(tuple(map(float, r)) for r in self.ranges)

    @property
    def n_params(self) -> int:
        return len(self.ranges)

    def spectrum(self, *params) -> np.ndarray:
        J = self.n_channels
        if self.kind == "gaussian_line":
            return gen_gaussian_line(params[0], self.width_factor, J)
        if self.kind == "powerlaw":
            return gen_powerlaw(params[0], params[1], J)
        return gen_thermal_proxy(params[0], params[1], J, self.line_seed)

    def sample(self, n: int, seed) -> tuple:
        """``n`` spectra with parameters drawn uniformly in the box."""
        rng = rng_from_seed(seed)
        lo = np.array([r[0] for r in self.ranges])
        hi = np.array([r[1] for r in self.ranges])
        params = lo + (hi - lo) * rng.random((n, self.n_params))
        return np.array([self.spectrum(*p) for p in params]), params

    def anchor_params(self) -> list:
        """Parameter-box corners giving mutually contrasting anchors."""
        (a0, a1), *rest = self.ranges
        if not rest:
            return [(a0,), (a1,)]
        b0, b1 = rest[0]
        return [(a0, b0), (a1, b0), (a0, b1)]

    def anchors(self) -> np.ndarray:
        return np.array([self.spectrum(*p) for p in self.anchor_params()])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n_channels": self.n_channels, "ranges": [list(r) for r in self.ranges],
                "width_factor": self.width_factor, "line_seed": self.line_seed}

    @classmethod
    def from_dict(cls, d) -> "SpectrumFamily":
        return cls(d["kind"], int(d["n_channels"]), tuple(map(tuple, d.get("ranges", ()))),
                   d.get("width_factor", 0.15), d.get("line_seed", 0))


def default_ranges(kind: str, n_channels: int) -> tuple:
    if kind == "gaussian_line":
        return ((0.2 * n_channels, 0.8 * n_channels),)
    if kind == "powerlaw":
        return ((1.0, 3.0), (1e-3, 1e-2))
    return ((0.15, 0.5), (0.5, 2.0))


# --------------------------------------------------------------------------
# Spatial templates
# --------------------------------------------------------------------------


def _blob(yy, xx, cy, cx, sy, sx, theta):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))


def _filaments(yy, xx, rng, width, height, n_curves, thickness=0.8):
    img = np.zeros_like(yy)
    for _ in range(n_curves):
        cy, cx = rng.uniform(0.3, 0.7) * height, rng.uniform(0.3, 0.7) * width
        r = rng.uniform(0.2, 0.42) * min(width, height)
        t0 = rng.uniform(0, 2 * np.pi)
        span = rng.uniform(0.6, 1.6)
        for t in np.linspace(t0, t0 + span, 40):
            py, px = cy + r * np.sin(t), cx + r * np.cos(t)
            img += 0.35 * np.exp(-0.5 * ((yy - py) ** 2 + (xx - px) ** 2) / thickness**2)
    return img


def gen_templates(width: int, height: int, n_sources: int, seed, blob_scale=(0.04, 0.1),
                  n_clumps: int = 6, n_shared: int = 3, shared_weight: float = 0.2,
                  filament_width: float = 1.5) -> np.ndarray:
    """Nonnegative synthetic images, one per row, each with unit RMS.

    Source 0 is filamentary (arcs plus a few compact knots); the others are
    clumpy. Blob widths are drawn in ``blob_scale`` (fractions of the image
    size). Sources after the first share ``shared_weight`` times a common
    population of ``n_shared`` clumps, so they are partially correlated.
    """
    rng = rng_from_seed([seed, 17])
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    size = min(width, height)

    def clumps(n):
        img = np.zeros((height, width))
        for _ in range(n):
            cy, cx = rng.uniform(0.12, 0.88) * height, rng.uniform(0.12, 0.88) * width
            sy, sx = rng.uniform(*blob_scale, 2) * size
            img += rng.uniform(0.4, 1.0) * _blob(yy, xx, cy, cx, sy, sx, rng.uniform(0, np.pi))
        return img

    shared = clumps(n_shared)
    out = np.empty((n_sources, width * height))
    for i in range(n_sources):
        if i == 0:
            img = _filaments(yy, xx, rng, width, height, 4, filament_width) + 0.5 * clumps(3)
        else:
            img = clumps(n_clumps) + shared_weight * shared
        img = np.maximum(img, 0.0)
        out[i] = img.ravel() / np.sqrt(np.mean(img**2))
    return out


def save_templates(path, S, width, height) -> tuple:
    from sgmca.io import save_npy

    path = Path(path)
    npy = path.with_suffix(".npy")
    side = path.with_suffix(".json")
    save_npy(npy, S)
    side.write_text(json.dumps({"width": int(width), "height": int(height)}, sort_keys=True) + "\n")
    return npy, side


def load_templates(path) -> tuple:
    """Read templates from ``<path>.npy`` with a ``<path>.json`` sidecar
    holding ``width`` and ``height``."""
    path = Path(path)
    S = np.load(path.with_suffix(".npy"))
    meta = json.loads(path.with_suffix(".json").read_text())
    width, height = int(meta["width"]), int(meta["height"])
    if S.ndim != 2 or S.shape[1] != width * height:
        raise ValueError(f"template array {S.shape} does not match {width}x{height}")
    if np.any(S < 0):
        raise ValueError("templates must be nonnegative")
    return S.astype(np.float64), width, height


# --------------------------------------------------------------------------
# Mixtures
# --------------------------------------------------------------------------


def mix(A, S, snr_db: float, seed) -> tuple:
    """``X = A S + N`` with Gaussian noise rescaled to the exact requested SNR.

    ``snr_db = inf`` gives ``N = 0``.
    """
    A = np.asarray(A, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if A.shape[1] != S.shape[0]:
        raise ValueError(f"incompatible shapes {A.shape} and {S.shape}")
    signal = A @ S
    energy = float(np.sum(signal**2))
    if energy == 0.0:
        raise ValueError("cannot set an SNR for a zero signal")
    if np.isinf(snr_db) and snr_db > 0:
        return signal.copy(), np.zeros_like(signal)
    G = gaussian_matrix(signal.shape[0], signal.shape[1], seed)
    sigma = np.sqrt(energy / (float(np.sum(G**2)) * 10.0 ** (snr_db / 10.0)))
    N = sigma * G
    return signal + N, N


def realized_snr(X, N) -> float:
    return 10.0 * np.log10(np.sum((X - N) ** 2) / np.sum(N**2))


@dataclass
class MixtureSpec:
    snr_db: float = 40.0
    delta: float = 20.0
    k_ratio: float = 1.0
    seed: int = 0
    central_channel: float | None = None

    def __post_init__(self):
        if np.isnan(self.snr_db):
            raise ValueError("snr_db must not be NaN")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        if self.k_ratio <= 0:
            raise ValueError("k_ratio must be positive")


@dataclass
class ExperimentFamilies:
    """The three families used in the four-source experiment."""

    sync: SpectrumFamily
    thermal: SpectrumFamily
    gauss: SpectrumFamily
    names: tuple = field(default=("sync", "thermal", "gauss1", "gauss2"))

    @classmethod
    def default(cls, n_channels: int) -> "ExperimentFamilies":
        return cls(SpectrumFamily("powerlaw", n_channels),
                   SpectrumFamily("thermal_proxy", n_channels),
                   SpectrumFamily("gaussian_line", n_channels))

    @property
    def n_channels(self) -> int:
        return self.sync.n_channels


def build_experiment(spec: MixtureSpec, families: ExperimentFamilies, templates) -> tuple:
    """Four-source mixture: synchrotron, thermal and two Gaussian lines.

    Sync/thermal parameters are drawn from the families' boxes; the two line
    centers sit ``delta`` channels apart, symmetric about the central channel.
    Rows 2-4 of ``S`` are multiplied by ``k_ratio``. Returns ``(X, A, S, N)``.
    """
    templates = np.asarray(templates, dtype=np.float64)
    if templates.shape[0] != 4:
        raise ValueError("the experiment needs exactly 4 templates")
    J = families.n_channels
    rng = rng_from_seed([spec.seed, 1])
    center = J / 2.0 if spec.central_channel is None else spec.central_channel

    def draw(fam):
        lo = np.array([r[0] for r in fam.ranges])
        hi = np.array([r[1] for r in fam.ranges])
        return fam.spectrum(*(lo + (hi - lo) * rng.random(fam.n_params)))

    A = np.column_stack([
        draw(families.sync),
        draw(families.thermal),
        families.gauss.spectrum(center - spec.delta / 2.0),
        families.gauss.spectrum(center + spec.delta / 2.0),
    ])
    S = templates.copy()
    S[1:] *= spec.k_ratio
    X, N = mix(A, S, spec.snr_db, [spec.seed, 2])
    return X, A, S, N
