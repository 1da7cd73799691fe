"""Train the sync/thermal/gauss IAE models used by the experiments.

    python3 scripts/train_models.py models/ --epochs sync=30000 gauss=30000

Unset families use the training table sizes and epochs (gauss: 100k epochs,
roughly 20 min on one core).
"""
import argparse
import logging
import time

import numpy as np

from sgmca import iae
from sgmca.experiment import FAMILY_NAMES, train_family_model
from sgmca.metrics import sad


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out")
    p.add_argument("--channels", type=int, default=40)
    p.add_argument("--epochs", nargs="*", default=[], help="NAME=EPOCHS overrides")
    p.add_argument("--families", nargs="*", default=list(FAMILY_NAMES))
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    epochs = {k: int(v) for k, v in (e.split("=") for e in args.epochs)}

    for name in args.families:
        t0 = time.perf_counter()
        res, _, X_test = train_family_model(name, args.channels, epochs=epochs.get(name), seed=args.seed)
        iae.save_model(res.model, f"{args.out}/{name}")
        s = [sad(iae.project_manifold(res.model, x).projected, x) for x in X_test]
        logging.info("%-8s %6d epochs  %5.0f s  val loss %.2e  test SAD median %.2f dB",
                     name, len(res.loss), time.perf_counter() - t0, res.val_loss[-1], np.median(s))


if __name__ == "__main__":
    main()
