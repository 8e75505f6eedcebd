"""Compare best validation RMSE of two variants over several seeds on one toy set.

Writes one CSV row per (group, seed) and prints the per-group means.
"""
import argparse
import csv
import tempfile
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from gequnet.data import DatasetManifest, load_dataset, write_toy_dataset
from gequnet.groups import GroupSpec
from gequnet.model import ModelConfig, build
from gequnet.train import TrainConfig, train


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--groups", default="c2,d4")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--maps", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--tx-per-map", type=int, default=4)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--width-scale", default="1/4")
    p.add_argument("--out", default="ordering_trend.csv")
    args = p.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        man = write_toy_dataset(tmp, args.maps, args.size, args.tx_per_map, seed=0)
        man = DatasetManifest.load(Path(tmp) / "manifest.txt")
        tr, va = load_dataset(man, "train"), load_dataset(man, "val")
        rows = []
        for name in args.groups.split(","):
            for seed in range(args.seeds):
                t0 = time.perf_counter()
                model = build(ModelConfig(spec=GroupSpec.parse(name), width_scale=Fraction(args.width_scale), seed=seed))
                cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, max_epochs=args.epochs, seed=seed)
                res = train(model, tr, va, cfg)
                rows.append({"group": name, "seed": seed, "best_val_rmse_norm": res.best_val.rmse_norm,
                             "best_epoch": res.best_epoch, "seconds": round(time.perf_counter() - t0, 1)})
                print(rows[-1], flush=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for name in args.groups.split(","):
        vals = [r["best_val_rmse_norm"] for r in rows if r["group"] == name]
        print(f"{name}: mean {np.mean(vals):.5f} std {np.std(vals):.5f} over {len(vals)} seeds")


if __name__ == "__main__":
    main()
