"""Command-line harness.

    sgmca generate     seeded spectra families, templates and mixtures
    sgmca train-iae    train one family's IAE, write model + loss CSV
    sgmca project      project spectra onto a trained manifold
    sgmca separate     run one algorithm on one generated mixture
    sgmca experiment   Monte-Carlo sweep, per-trial and aggregated CSV
    sgmca evaluate     score saved estimates, or aggregate a trials CSV

Every subcommand reads an optional JSON config (``--config``) whose keys
are the flag names with underscores; flags given on the command line win.
Outputs go to ``--out``, else ``$SGMCA_OUTPUT_DIR/<command>``, else
``./sgmca-output/<command>``; each output directory gets a
``manifest.json`` with SHA-256 hashes.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from sgmca import experiment as ex
from sgmca import iae
from sgmca.io import load_npy, read_csv, save_npy, write_csv, write_manifest
from sgmca.matops import NumericalError
from sgmca.metrics import evaluate
from sgmca.separation import SeparationOptions
from sgmca.synthdata import (ExperimentFamilies, MixtureSpec, build_experiment, gen_templates,
                             load_templates, save_templates)

log = logging.getLogger("sgmca")

OUTPUT_ENV = "SGMCA_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# Per-command configs
# --------------------------------------------------------------------------


@dataclass
class GenerateConfig:
    n_channels: int = 40
    width: int = 64
    height: int = 64
    n_trials: int = 10
    master_seed: int = 0
    snr_db: float = 40.0
    delta: float = 20.0
    k_ratio: float = 1.0
    n_family_samples: int = 200
    template_seed: int = 0
    templates: str | None = None  # load instead of generating


@dataclass
class TrainConfig:
    family: str = "gauss"
    n_channels: int = 40
    n_train: int | None = None  # None: the family's training-table value
    n_test: int | None = None
    epochs: int | None = None
    batch_size: int = 25
    learning_rate: float = 1e-4
    n_layers: int = 4
    skip_param: float = 0.1
    seed: int = 0
    spectra: str | None = None  # custom training set (.npy rows); overrides family draws
    n_anchors: int = 2  # only with --spectra


@dataclass
class ProjectConfig:
    model: str | None = None
    spectra: str | None = None
    method: str = "iterative"  # or "fast"
    max_iters: int = 300
    lr: float = 0.01
    exact_affine: bool = False


@dataclass
class SeparateConfig:
    data: str | None = None  # a trial directory written by generate
    algorithm: str = "sgmca"
    model_dir: str | None = None
    models_subset: str = "all"
    nmf_iters: int = 500
    snmf_lambda: float = 1e-7
    nn_train_size: int = 200
    separation: dict = field(default_factory=dict)


@dataclass
class EvaluateConfig:
    trials: str | None = None  # aggregate this trials CSV ...
    sweep: str = "snr"
    estimate: str | None = None  # ... or score A.npy/S.npy in this directory
    data: str | None = None  # against this trial directory
    algorithm: str = "unknown"


# --------------------------------------------------------------------------
# Argument handling
# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool(text):
    t = str(text).lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _scalar(text):
    """JSON-ish value for --sep overrides: numbers, booleans, else string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _kv(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), _scalar(v)


def _default_of(f):
    if f.default is not MISSING:
        return f.default
    return f.default_factory()


def _add_config_flags(p, cls):
    """One flag per dataclass field, defaulting to None so that only the
    flags actually given override the JSON config."""
    for f in fields(cls):
        flag = "--" + f.name.replace("_", "-")
        d = _default_of(f)
        if f.name == "separation":
            p.add_argument("--sep", dest="separation", action="append", type=_kv, metavar="KEY=VALUE",
                           help="separation option override, repeatable (e.g. --sep max_iters=20)")
        elif isinstance(d, bool):
            p.add_argument(flag, dest=f.name, type=_bool, metavar="BOOL", help=f"default {d}")
        elif isinstance(d, tuple):
            p.add_argument(flag, dest=f.name, nargs="+", type=_scalar, help=f"default {list(d)}")
        elif isinstance(d, int) or "int" in str(f.type):
            p.add_argument(flag, dest=f.name, type=int, help=f"default {d}")
        elif isinstance(d, float):
            p.add_argument(flag, dest=f.name, type=float, help=f"default {d}")
        else:
            p.add_argument(flag, dest=f.name, help=f"default {d}")


def _resolve(cls, args):
    """dataclass defaults < JSON config < command-line flags."""
    values = {}
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(values, dict):
            raise UsageError("the JSON config must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)}")
    for name in names:
        v = getattr(args, name, None)
        if v is None:
            continue
        if name == "separation":
            v = {**values.get("separation", {}), **dict(v)}
        values[name] = v
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from e


def _out_dir(args, command) -> Path:
    if args.out:
        path = Path(args.out)
    else:
        path = Path(os.environ.get(OUTPUT_ENV, "sgmca-output")) / command
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(value, flag):
    if value is None:
        raise UsageError(f"{flag} is required")
    return value


def _write_json(path, doc) -> Path:
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _sep_options(width, height, seed, overrides) -> SeparationOptions:
    bad = set(overrides) & {"width", "height", "seed"}
    if bad:
        raise UsageError(f"{sorted(bad)} come from the data, not from --sep")
    try:
        return SeparationOptions(width, height, seed=seed, **overrides)
    except TypeError as e:
        raise UsageError(f"bad separation option: {e}") from e


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_generate(cfg: GenerateConfig, out: Path) -> list:
    written = [_write_json(out / "config.json", asdict(cfg))]
    fams = ExperimentFamilies.default(cfg.n_channels)
    fam_doc = {}
    for i, name in enumerate(ex.FAMILY_NAMES):
        fam = getattr(fams, name)
        spectra, params = fam.sample(cfg.n_family_samples, [cfg.master_seed, 100 + i])
        written += [save_npy(out / "families" / f"{name}.npy", spectra),
                    save_npy(out / "families" / f"{name}_params.npy", params)]
        fam_doc[name] = fam.to_dict()
    written.append(_write_json(out / "families" / "families.json", fam_doc))

    if cfg.templates:
        S, w, h = load_templates(cfg.templates)
        if (w, h) != (cfg.width, cfg.height):
            raise UsageError(f"templates are {w}x{h}, config says {cfg.width}x{cfg.height}")
    else:
        S = gen_templates(cfg.width, cfg.height, 4, cfg.template_seed)
    written += save_templates(out / "templates", S, cfg.width, cfg.height)

    for t in range(cfg.n_trials):
        seed = ex.trial_seed(cfg.master_seed, t)
        X, A, S_t, N = build_experiment(MixtureSpec(cfg.snr_db, cfg.delta, cfg.k_ratio, seed), fams, S)
        d = out / "trials" / f"trial_{t:03d}"
        for key, arr in (("X", X), ("A", A), ("S", S_t), ("N", N)):
            written.append(save_npy(d / f"{key}.npy", arr))
        meta = {"trial": t, "seed": seed, "snr": cfg.snr_db, "delta": cfg.delta, "k": cfg.k_ratio,
                "width": cfg.width, "height": cfg.height, "n_channels": cfg.n_channels}
        written.append(_write_json(d / "meta.json", meta))
    return written


def cmd_train_iae(cfg: TrainConfig, out: Path) -> list:
    kw = dict(batch_size=cfg.batch_size, learning_rate=cfg.learning_rate, n_layers=cfg.n_layers,
              skip_param=cfg.skip_param)
    if cfg.spectra:
        X = load_npy(cfg.spectra)
        idx = iae.farthest_point_anchors(X, cfg.n_anchors)
        tc = iae.IAETrainConfig(epochs=cfg.epochs or 1000, seed=cfg.seed, validation_fraction=0.0, **kw)
        res = iae.train_iae(X, iae.AnchorSet(X[idx]), tc, name=cfg.family)
        X_train = X
    else:
        if cfg.family not in ex.TRAINING_TABLE:
            raise UsageError(f"unknown family {cfg.family!r}; expected one of {ex.FAMILY_NAMES}")
        res, X_train, _ = ex.train_family_model(cfg.family, cfg.n_channels, cfg.n_train, cfg.n_test,
                                                cfg.epochs, cfg.seed, **kw)
    written = list(iae.save_model(res.model, out / cfg.family))
    rows = [{"epoch": e + 1, "loss": float(l),
             "val_loss": float(res.val_loss[e]) if e < len(res.val_loss) else float("nan")}
            for e, l in enumerate(res.loss)]
    written.append(write_csv(out / f"{cfg.family}_loss.csv", rows, ["epoch", "loss", "val_loss"]))
    written.append(save_npy(out / f"{cfg.family}_train.npy", X_train))
    written.append(_write_json(out / f"{cfg.family}_config.json", asdict(cfg)))
    return written


def cmd_project(cfg: ProjectConfig, out: Path) -> list:
    model = iae.load_model(_require(cfg.model, "--model"))
    B = np.atleast_2d(load_npy(_require(cfg.spectra, "--spectra")))
    if B.shape[1] != model.input_dim:
        raise UsageError(f"spectra have {B.shape[1]} channels, the model expects {model.input_dim}")
    if cfg.method not in ("iterative", "fast"):
        raise UsageError(f"unknown projection method {cfg.method!r}")
    results = []
    for b in B:
        if cfg.method == "fast":
            results.append(iae.project_fast(model, b, cfg.exact_affine))
        else:
            results.append(iae.project_manifold(model, b, cfg.max_iters, cfg.lr))
    rows = [{"index": i, "rho": r.rho, "residual": r.residual} for i, r in enumerate(results)]
    return [save_npy(out / "projected.npy", np.array([r.projected for r in results])),
            save_npy(out / "lambda.npy", np.array([r.lam for r in results])),
            write_csv(out / "projection.csv", rows, ["index", "rho", "residual"])]


def _load_trial(path):
    d = Path(path)
    if not (d / "meta.json").exists():
        raise UsageError(f"{d} is not a trial directory (no meta.json)")
    meta = json.loads((d / "meta.json").read_text())
    arrays = {k: load_npy(d / f"{k}.npy") for k in ("X", "A", "S", "N")}
    return meta, arrays


def _metrics_row(algo, meta, rep) -> dict:
    row = {"algo": algo, "trial": meta["trial"], "seed": meta["seed"], "snr": float(meta["snr"]),
           "delta": float(meta["delta"]), "k": float(meta["k"])}
    row.update(rep.as_row())
    return row


def cmd_separate(cfg: SeparateConfig, out: Path) -> list:
    meta, arr = _load_trial(_require(cfg.data, "--data"))
    if cfg.models_subset not in ex.MODEL_SUBSETS:
        raise UsageError(f"unknown model subset {cfg.models_subset!r}")
    if cfg.algorithm not in ex.ALGORITHMS:
        raise UsageError(f"unknown algorithm {cfg.algorithm!r}")
    names = ex.MODEL_SUBSETS[cfg.models_subset] if cfg.algorithm in ("sgmca", "nn_benchmark") else ()
    if cfg.algorithm == "sgmca" and names and not cfg.model_dir:
        raise UsageError("--model-dir is required for sgmca with models")
    opts = _sep_options(meta["width"], meta["height"], meta["seed"], cfg.separation)
    X, I = arr["X"], arr["S"].shape[0]
    A, S, stop, iters = ex.run_algorithm(
        cfg.algorithm, X, I, opts, names, cfg.model_dir,
        ExperimentFamilies.default(X.shape[0]), meta["seed"], cfg.nmf_iters, cfg.snmf_lambda,
        cfg.nn_train_size)
    rep = evaluate(A, S, arr["A"], arr["S"], arr["N"])
    A_al, S_al = A[:, rep.permutation] / rep.scales, S[rep.permutation] * rep.scales[:, None]
    run = {"algorithm": cfg.algorithm, "stop_reason": stop, "iterations": iters,
           "permutation": rep.permutation.tolist(), "models": list(names),
           "data": str(cfg.data)}
    return [save_npy(out / "A.npy", A_al), save_npy(out / "S.npy", S_al),
            write_csv(out / "metrics.csv", [_metrics_row(cfg.algorithm, meta, rep)], ex.trial_columns(I)),
            _write_json(out / "run.json", run)]


def cmd_experiment(cfg: ex.ExperimentConfig, out: Path) -> list:
    rows = ex.run_experiment(cfg)
    agg = ex.aggregate(rows, cfg.sweep)
    return [_write_json(out / "config.json", cfg.to_dict()),
            write_csv(out / "trials.csv", rows, ex.trial_columns() + ex.EXTRA_COLUMNS),
            write_csv(out / "aggregate.csv", agg, ex.AGG_COLUMNS)]


def _typed_rows(rows):
    text = {"algo", "models_subset", "stop_reason"}
    return [{k: (v if k in text else float(v)) for k, v in r.items()} for r in rows]


def cmd_evaluate(cfg: EvaluateConfig, out: Path) -> list:
    if cfg.trials:
        if cfg.sweep not in ex.SWEEPS:
            raise UsageError(f"unknown sweep {cfg.sweep!r}")
        agg = ex.aggregate(_typed_rows(read_csv(cfg.trials)), cfg.sweep)
        return [write_csv(out / "aggregate.csv", agg, ex.AGG_COLUMNS)]
    est = Path(_require(cfg.estimate, "--estimate or --trials"))
    meta, arr = _load_trial(_require(cfg.data, "--data"))
    rep = evaluate(load_npy(est / "A.npy"), load_npy(est / "S.npy"), arr["A"], arr["S"], arr["N"])
    return [write_csv(out / "metrics.csv", [_metrics_row(cfg.algorithm, meta, rep)],
                      ex.trial_columns(arr["S"].shape[0]))]


COMMANDS = {
    "generate": (GenerateConfig, cmd_generate, "seeded spectra, templates and mixtures"),
    "train-iae": (TrainConfig, cmd_train_iae, "train one family's interpolatory autoencoder"),
    "project": (ProjectConfig, cmd_project, "project spectra onto a trained manifold"),
    "separate": (SeparateConfig, cmd_separate, "run one algorithm on one generated mixture"),
    "experiment": (ex.ExperimentConfig, cmd_experiment, "Monte-Carlo sweep with aggregation"),
    "evaluate": (EvaluateConfig, cmd_evaluate, "score estimates or aggregate a trials CSV"),
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sgmca", description="Semi-blind source separation with learned spectral models.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (cls, _, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", help="JSON file of defaults for the flags below")
        sp.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV}/{name})")
        _add_config_flags(sp, cls)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    cls, func, _ = COMMANDS[args.command]
    try:
        cfg = _resolve(cls, args)
        out = _out_dir(args, args.command)
        written = func(cfg, out)
        write_manifest(out, written, {"command": args.command})
    except UsageError as e:
        print(f"sgmca {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"sgmca {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"sgmca {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
