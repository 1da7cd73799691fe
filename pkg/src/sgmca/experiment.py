"""Monte-Carlo harness: seeded trials of the four-source experiment, one
CSV row per (trial, algorithm), and median/quartile aggregation."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from sgmca import baselines, iae
from sgmca.metrics import evaluate
from sgmca.separation import NearestNeighborPrior, SeparationOptions, gmca, sgmca
from sgmca.synthdata import ExperimentFamilies, MixtureSpec, build_experiment, gen_templates, load_templates

log = logging.getLogger(__name__)

SWEEPS = ("snr", "delta", "k", "models_subset")
ALGORITHMS = ("sgmca", "gmca", "hals", "snmf", "nn_benchmark")
FAMILY_NAMES = ("sync", "thermal", "gauss")

# model name per source, None for an unconstrained column
MODEL_SUBSETS = {
    "all": ("sync", "thermal", "gauss", "gauss"),
    "therm_gauss": ("thermal", "gauss", "gauss"),
    "sync_gauss": ("sync", "gauss", "gauss"),
    "gauss": ("gauss", "gauss"),
    "none": (),
}


@dataclass
class ExperimentConfig:
    sweep: str = "snr"
    grid: tuple = (40.0,)
    n_trials: int = 10
    algorithms: tuple = ("sgmca", "gmca")
    master_seed: int = 0
    # fixed values for the variables that are not swept
    snr_db: float = 40.0
    delta: float = 20.0
    k_ratio: float = 1.0
    models_subset: str = "all"
    model_dir: str | None = None  # holds sync/thermal/gauss model files
    templates: str | None = None  # .npy + .json sidecar; generated when None
    width: int = 64
    height: int = 64
    n_channels: int = 40
    template_seed: int = 0
    nmf_iters: int = 500
    snmf_lambda: float = 1e-7
    nn_train_size: int = 200
    workers: int = 1
    separation: dict = field(default_factory=dict)  # SeparationOptions overrides

    def __post_init__(self):
        self.grid = tuple(self.grid)
        self.algorithms = tuple(self.algorithms)
        if self.sweep not in SWEEPS:
            raise ValueError(f"unknown sweep variable {self.sweep!r}")
        if not self.grid:
            raise ValueError("the sweep grid is empty")
        if self.n_trials < 1:
            raise ValueError("n_trials must be at least 1")
        bad = set(self.algorithms) - set(ALGORITHMS)
        if bad:
            raise ValueError(f"unknown algorithms {sorted(bad)}")
        subsets = self.grid if self.sweep == "models_subset" else (self.models_subset,)
        for s in subsets:
            if s not in MODEL_SUBSETS:
                raise ValueError(f"unknown model subset {s!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"], d["algorithms"] = list(self.grid), list(self.algorithms)
        return d

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown experiment config keys {sorted(unknown)}")
        return cls(**d)


# per family: (kind, anchors, training samples, validation+test samples, epochs)
TRAINING_TABLE = {
    "sync": ("powerlaw", 3, 541, 178, 10_000),
    "thermal": ("thermal_proxy", 3, 601, 198, 10_000),
    "gauss": ("gaussian_line", 2, 600, 200, 100_000),
}


def family_of(name: str, n_channels: int):
    fams = ExperimentFamilies.default(n_channels)
    if name not in FAMILY_NAMES:
        raise ValueError(f"unknown family {name!r}; expected one of {FAMILY_NAMES}")
    return getattr(fams, name)


def train_family_model(name: str, n_channels: int = 40, n_train=None, n_test=None, epochs=None,
                       seed: int = 0, **train_kw):
    """Train the IAE of one experiment family on seeded draws.

    Unset sizes fall back to ``TRAINING_TABLE``. Returns
    ``(TrainResult, train_spectra, test_spectra)``; train and test use
    disjoint seeds.
    """
    _, _, tab_train, tab_test, tab_epochs = TRAINING_TABLE[name]
    fam = family_of(name, n_channels)
    X_train, _ = fam.sample(n_train or tab_train, [seed, 0])
    X_test, _ = fam.sample(n_test or tab_test, [seed, 1])
    cfg = iae.IAETrainConfig(epochs=epochs or tab_epochs, seed=seed, **train_kw)
    res = iae.train_iae(X_train, iae.AnchorSet(fam.anchors()), cfg, name=name, validation=X_test)
    return res, X_train, X_test


def trial_seed(master_seed: int, index: int) -> int:
    """Per-trial seed: a seeded hash of (master_seed, index)."""
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def point_settings(cfg: ExperimentConfig, value) -> dict:
    s = {"snr": cfg.snr_db, "delta": cfg.delta, "k": cfg.k_ratio, "models_subset": cfg.models_subset}
    s[cfg.sweep] = value if cfg.sweep == "models_subset" else float(value)
    return s


_MODEL_CACHE: dict = {}


def load_family_models(model_dir) -> dict:
    key = str(Path(model_dir).resolve())
    if key not in _MODEL_CACHE:
        _MODEL_CACHE[key] = {n: iae.load_model(Path(model_dir) / n) for n in FAMILY_NAMES}
    return _MODEL_CACHE[key]


def experiment_templates(cfg: ExperimentConfig) -> np.ndarray:
    if cfg.templates:
        S, w, h = load_templates(cfg.templates)
        if (w, h) != (cfg.width, cfg.height):
            raise ValueError(f"templates are {w}x{h}, config says {cfg.width}x{cfg.height}")
        return S
    return gen_templates(cfg.width, cfg.height, 4, cfg.template_seed)


def _nn_models(families: ExperimentFamilies, n_train: int, seed):
    priors = {}
    for i, name in enumerate(FAMILY_NAMES):
        spectra, _ = getattr(families, name).sample(n_train, [seed, 10 + i])
        priors[name] = NearestNeighborPrior(spectra, name)
    return priors


def run_algorithm(algo: str, X, I: int, opts: SeparationOptions, model_names=(), model_dir=None,
                  families: ExperimentFamilies | None = None, seed: int = 0, nmf_iters: int = 500,
                  snmf_lambda: float = 1e-7, nn_train_size: int = 200, warm=None) -> tuple:
    """One separation run. Returns ``(A, S, stop_reason, iterations)``;
    the NMF baselines report an empty stop reason.

    ``warm`` is a GMCA result reused as the sGMCA starting point (and as
    the GMCA answer itself).
    """
    if algo not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algo!r}")
    if algo == "gmca":
        res = warm or gmca(X, I, opts)
        return res.A, res.S, res.stop_reason, res.iterations
    if algo in ("sgmca", "nn_benchmark"):
        if algo == "sgmca":
            if model_names and model_dir is None:
                raise ValueError("sgmca with models needs a model directory")
            bank = load_family_models(model_dir) if model_names else {}
        else:
            families = families or ExperimentFamilies.default(X.shape[0])
            bank = _nn_models(families, nn_train_size, seed)
        res = sgmca(X, I, [bank[n] for n in model_names], opts, init=warm)
        return res.A, res.S, res.stop_reason, res.iterations
    if algo == "hals":
        res = baselines.hals(X, I, nmf_iters, seed)
    else:
        res = baselines.snmf(X, I, nmf_iters, snmf_lambda, seed)
    return res.A, res.S, "", res.iterations


def run_trial(cfg: ExperimentConfig, value, trial: int, templates=None) -> list:
    """All requested algorithms on one seeded mixture; one row per algorithm.

    GMCA runs once and initialises every sGMCA variant of the trial.
    """
    seed = trial_seed(cfg.master_seed, trial)
    st = point_settings(cfg, value)
    families = ExperimentFamilies.default(cfg.n_channels)
    if templates is None:
        templates = experiment_templates(cfg)
    X, A, S, N = build_experiment(MixtureSpec(st["snr"], st["delta"], st["k"], seed), families, templates)
    opts = SeparationOptions(cfg.width, cfg.height, seed=seed, **cfg.separation)
    I = S.shape[0]
    t0 = time.perf_counter()
    need_gmca = any(a in ("gmca", "sgmca", "nn_benchmark") for a in cfg.algorithms)
    warm = gmca(X, I, opts) if need_gmca else None
    t_gmca = time.perf_counter() - t0

    rows = []
    for algo in cfg.algorithms:
        t0 = time.perf_counter()
        A_est, S_est, stop, iters = run_algorithm(
            algo, X, I, opts, MODEL_SUBSETS[st["models_subset"]], cfg.model_dir, families, seed,
            cfg.nmf_iters, cfg.snmf_lambda, cfg.nn_train_size, warm)
        elapsed = t_gmca if algo == "gmca" else time.perf_counter() - t0
        rep = evaluate(A_est, S_est, A, S, N)
        row = {"algo": algo, "trial": trial, "seed": seed, "snr": st["snr"], "delta": st["delta"],
               "k": st["k"]}
        row.update(rep.as_row())
        row.update({"models_subset": st["models_subset"], "stop_reason": stop, "iterations": iters,
                    "seconds": elapsed})
        rows.append(row)
        log.info("trial %d %s=%s %s: SAD %.2f dB, %s after %d iterations, %.1f s", trial, cfg.sweep,
                 value, algo, rep.sad_overall, stop or "done", iters, elapsed)
    return rows


def trial_columns(n_sources: int = 4) -> list:
    cols = ["algo", "trial", "seed", "snr", "delta", "k", "sad_overall"]
    for m in ("sad", "sdr", "sir", "snr", "sar"):
        cols += [f"{m}_{i}" for i in range(1, n_sources + 1)]
    return cols


# wall-clock "seconds" stays out of the CSV so the file is reproducible
EXTRA_COLUMNS = ["models_subset", "stop_reason", "iterations"]


def _job(args):
    cfg, gi, value, trial = args
    return gi, trial, run_trial(cfg, value, trial)


def run_experiment(cfg: ExperimentConfig, progress=None) -> list:
    """Every (grid value, trial) pair; rows come back in grid/trial order
    whatever the worker count."""
    jobs = [(cfg, gi, v, t) for gi, v in enumerate(cfg.grid) for t in range(cfg.n_trials)]
    out = {}
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            for gi, t, rows in pool.map(_job, jobs):
                out[gi, t] = rows
    else:
        templates = experiment_templates(cfg)
        for _, gi, v, t in jobs:
            out[gi, t] = run_trial(cfg, v, t, templates)
            if progress:
                progress(gi, t, out[gi, t])
    return [r for key in sorted(out) for r in out[key]]


def derived_metrics(row: dict, n_sources: int = 4) -> dict:
    """Per-trial means over all sources and over the faint ones (2..I)."""
    d = {"sad_overall": row["sad_overall"]}
    for m in ("sdr", "sir", "snr", "sar"):
        vals = [row[f"{m}_{i}"] for i in range(1, n_sources + 1)]
        d[f"{m}_all"] = float(np.mean(vals))
        d[f"{m}_faint"] = float(np.mean(vals[1:]))
    return d


AGG_COLUMNS = ["sweep", "value", "algo", "metric", "median", "q1", "q3", "n"]


def aggregate(rows, sweep: str) -> list:
    """Median, first and third quartile per (grid value, algorithm, metric),
    in first-appearance order."""
    key_of = {"snr": "snr", "delta": "delta", "k": "k", "models_subset": "models_subset"}[sweep]
    groups: dict = {}
    for r in rows:
        groups.setdefault((r[key_of], r["algo"]), []).append(derived_metrics(r))
    out = []
    for (value, algo), items in groups.items():
        for metric in items[0]:
            v = np.array([it[metric] for it in items])
            q1, med, q3 = np.percentile(v, [25, 50, 75])
            out.append({"sweep": sweep, "value": value, "algo": algo, "metric": metric,
                        "median": float(med), "q1": float(q1), "q3": float(q3), "n": len(v)})
    return out


def lookup(agg, value, algo, metric, stat="median") -> float:
    for r in agg:
        if r["value"] == value and r["algo"] == algo and r["metric"] == metric:
            return r[stat]
    raise KeyError((value, algo, metric))
