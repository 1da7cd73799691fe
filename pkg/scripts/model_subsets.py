"""Median SAD and faint-source SIR of sGMCA per model subset, balanced
(k=1) and unbalanced (k=0.01) mixtures.

    python3 scripts/model_subsets.py models/ --trials 10 --out subsets.csv
"""
import argparse
import csv

from sgmca.experiment import MODEL_SUBSETS, ExperimentConfig, aggregate, lookup, run_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("model_dir")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--k", type=float, nargs="*", default=[1.0, 0.01])
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default=None)
    args = p.parse_args()

    table = []
    for k in args.k:
        cfg = ExperimentConfig(sweep="models_subset", grid=tuple(MODEL_SUBSETS), k_ratio=k,
                               n_trials=args.trials, algorithms=("sgmca",), model_dir=args.model_dir,
                               workers=args.workers)
        agg = aggregate(run_experiment(cfg), "models_subset")
        for s in MODEL_SUBSETS:
            table.append({"k": k, "subset": s, **{m: round(lookup(agg, s, "sgmca", m), 2)
                                                   for m in ("sad_overall", "sir_faint", "sdr_all")}})
    print(f"{'k':>6} {'subset':<12} {'SAD':>7} {'SIR faint':>10} {'SDR':>7}")
    for r in table:
        print(f"{r['k']:>6} {r['subset']:<12} {r['sad_overall']:>7} {r['sir_faint']:>10} {r['sdr_all']:>7}")
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(table[0]))
            w.writeheader()
            w.writerows(table)


if __name__ == "__main__":
    main()
