"""Synthesize a toy set, train one variant and evaluate it on the test split.

    python scripts/toy_experiment.py --group c4 --out runs/c4
"""
import argparse
import time
from pathlib import Path

from gequnet.cli import main as cli


def run(args) -> int:
    out = Path(args.out)
    data = out / "toy"
    if not (data / "manifest.txt").exists():
        cli(["synth", "--maps", str(args.maps), "--size", str(args.size), "--tx-per-map", str(args.tx_per_map),
             "--seed", str(args.data_seed), "--out", str(data)])
    cfg = out / "run.cfg"
    cfg.write_text(
        f"manifest = {data.resolve() / 'manifest.txt'}\n"
        f"group = {args.group}\nwidth_scale = {args.width_scale}\nseed = {args.seed}\n"
        f"max_epochs = {args.epochs}\nlearning_rate = {args.lr}\nbatch_size = {args.batch_size}\n"
    )
    t0 = time.perf_counter()
    rc = cli(["train", "--config", str(cfg), "--out", str(out / "train")])
    print(f"training took {time.perf_counter() - t0:.0f}s")
    if rc:
        return rc
    return cli(["eval", "--checkpoint", str(out / "train" / "best.ckpt"), "--manifest", str(data / "manifest.txt"),
                "--split", "test", "--out", str(out / "eval")])


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--group", default="c4")
    p.add_argument("--maps", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--tx-per-map", type=int, default=4)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--width-scale", default="1/4")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    raise SystemExit(run(p.parse_args()))
