"""Held-out ablation of direction learning and box-aware mask loss.

    python scripts/ablation.py --seeds 0 1 --out ablation.json
"""
import argparse
import json
import logging
from dataclasses import replace

import numpy as np

from shadowpairs.experiments import ABLATION_TRAIN, ablation

KEYS = ("soap_segm", "soap_bbox", "assoc_ap_segm", "inst_ap_segm")


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--train-scenes", type=int, default=256)
    p.add_argument("--eval-scenes", type=int, default=64)
    p.add_argument("--epochs", type=int, default=ABLATION_TRAIN.epochs)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--out")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = replace(ABLATION_TRAIN, epochs=args.epochs)
    results = ablation(args.train_scenes, args.eval_scenes, args.data_seed, cfg, tuple(args.seeds), log_every=10)
    rows = {}
    for name, runs in results.items():
        rows[name] = [{"seed": s, "final_loss": r.final_loss, "seconds": r.seconds, **{k: getattr(r.report, k) for k in KEYS}} for s, r in zip(args.seeds, runs)]
        for row in rows[name]:
            print(f"{name:>10} seed {row['seed']}  " + "  ".join(f"{k} {row[k]:.4f}" for k in KEYS))
        print(f"{name:>10} mean    " + "  ".join(f"{k} {np.mean([row[k] for row in rows[name]]):.4f}" for k in KEYS))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(rows, f, indent=2)


if __name__ == "__main__":
    main()
