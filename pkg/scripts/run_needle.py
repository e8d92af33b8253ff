#!/usr/bin/env python3
"""Needle-retention experiment over several seeds with the default settings.

Every method sees the same per-seed dataset; results go to a CSV with one row
per (method, seed) and the per-position accuracies.
"""
import argparse
from pathlib import Path

import numpy as np

from bimba import harness

LAYOUTS = [("append", "uni"), ("append", "bi"), ("interleave", "uni"), ("interleave", "bi")]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default="results/needle.csv")
    ap.add_argument("--with-attention", action="store_true",
                    help="also probe the perceiver and full-attention baselines")
    args = ap.parse_args()

    cfg = harness.NeedleDefaults()
    methods = ["pool"] + [cfg.selector(lay, dirn) for lay, dirn in LAYOUTS]
    if args.with_attention:
        methods += ["perceiver", "attention"]
    results = harness.needle_experiment(methods, range(args.seeds), cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    harness.write_needle_csv(args.out, results)

    chance = 1.0 / cfg.n_positions
    print(f"chance level {chance:.3f}; {args.seeds} seeds\n")
    print(f"{'method':<22} {'mean acc':>9} {'sd':>7} {'spread':>7}  per-position")
    for m in methods:
        name = harness.method_name(m)
        rs = [r for r in results if r.method == name]
        acc = np.array([r.accuracy for r in rs])
        per_pos = np.mean([r.per_position for r in rs], axis=0)
        cells = " ".join(f"{v:.2f}" for v in per_pos)
        print(f"{name:<22} {acc.mean():>9.3f} {acc.std():>7.3f} "
              f"{per_pos.max() - per_pos.min():>7.3f}  {cells}")


if __name__ == "__main__":
    main()
