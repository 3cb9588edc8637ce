"""Overfit the desk-scale model on 16 synthetic scenes and report training-set metrics.

    python scripts/overfit.py --epochs 500
"""
import argparse
import json
import logging
from dataclasses import replace

from shadowpairs.experiments import OVERFIT_TRAIN, overfit


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--scenes", type=int, default=16)
    p.add_argument("--epochs", type=int, default=OVERFIT_TRAIN.epochs)
    p.add_argument("--lr", type=float, default=OVERFIT_TRAIN.lr)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = replace(OVERFIT_TRAIN, epochs=args.epochs, lr=args.lr, seed=args.seed)
    r = overfit(args.scenes, args.seed, cfg, log_every=50)
    print(r.report.row())
    print(f"{r.iterations} iterations in {r.seconds:.0f}s, final loss {r.final_loss:.4f}")
    if args.out:
        with open(args.out, "w") as f:
            json.dump({"final_loss": r.final_loss, "iterations": r.iterations, "seconds": r.seconds, **r.report.to_dict()}, f, indent=2)


if __name__ == "__main__":
    main()
