"""SNR, delta and k sweeps for every algorithm; one trials/aggregate CSV
pair per sweep, written through the CLI.

    python3 scripts/sweeps.py models/ runs/ --trials 10
"""
import argparse
import subprocess
import sys

GRIDS = {"snr": "10 20 30 40 60", "delta": "2 5 10 20", "k": "1 0.5 0.1 0.05 0.01"}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("model_dir")
    p.add_argument("out")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--algorithms", default="sgmca gmca hals snmf")
    args = p.parse_args()
    for sweep, grid in GRIDS.items():
        cmd = [sys.executable, "-m", "sgmca.cli", "experiment", "--sweep", sweep, "--grid", *grid.split(),
               "--algorithms", *args.algorithms.split(), "--n-trials", str(args.trials),
               "--model-dir", args.model_dir, "--workers", str(args.workers), "--out", f"{args.out}/{sweep}"]
        print(" ".join(cmd), flush=True)
        subprocess.run(cmd, check=True)


if __name__ == "__main__":
    main()
