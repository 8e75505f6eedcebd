"""``gequnet`` command line: synth, train, eval, predict, verify, params.

Exit codes: 0 success, 1 verification or metric failure, 2 usage/config error.
``GEQUNET_THREADS`` caps BLAS threads.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import data as D
from .config import ConfigError, RunConfig, dump_kv, parse_kv
from .groups import GroupSpec, UnsupportedGroupError
from .model import CheckpointError, build, load_checkpoint, save_checkpoint
from .tensor import ShapeError
from .train import TrainingDiverged, evaluate, train, write_curves

log = logging.getLogger("gequnet")

GROUP_CHOICES = ("c2", "c4", "c8", "d2", "d4", "d8")


class UsageError(Exception):
    pass


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise UsageError(f"cannot write to {out}: {e}") from e
    return out


def _split_counts(s: str | None):
    if s is None:
        return None
    parts = tuple(int(v) for v in s.split(","))
    if len(parts) != 3:
        raise UsageError("--split needs three comma-separated counts")
    return parts


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = _out_dir(args.out)
    man = D.write_toy_dataset(
        out, args.maps, args.size, args.tx_per_map, args.seed, _split_counts(args.split), args.format
    )
    print(f"wrote {len(man.map_ids)} maps to {out} (splits " +
          ", ".join(f"{k}={len(v)}" for k, v in man.splits.items()) + ")")
    return 0


def cmd_train(args) -> int:
    file_values = {}
    base = None
    if args.config:
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            raise UsageError(f"config file not found: {cfg_path}")
        file_values = parse_kv(cfg_path.read_text(encoding="utf-8"), str(cfg_path))
        base = cfg_path.parent
    overrides = {
        "group": args.group,
        "manifest": args.manifest,
        "max_epochs": args.epochs,
        "learning_rate": args.lr,
        "batch_size": args.batch_size,
        "width_scale": args.width_scale,
        "seed": args.seed,
    }
    run = RunConfig.resolve(file_values, overrides, base)
    if run.manifest is None:
        raise UsageError("no dataset manifest given (config key 'manifest' or --manifest)")
    if not run.manifest.is_file():
        raise UsageError(f"manifest not found: {run.manifest}")
    out = _out_dir(args.out)
    manifest = D.DatasetManifest.load(run.manifest)
    train_set = D.load_dataset(manifest, "train")
    val_set = D.load_dataset(manifest, "val")
    model = build(run.model)

    curves = []

    def on_epoch(epoch, row, m, is_best):
        curves.append(row)
        write_curves(curves, out / "curves.csv")
        save_checkpoint(m, out / "last.ckpt", {"epoch": epoch})
        if is_best:
            save_checkpoint(m, out / "best.ckpt", {"epoch": epoch, "val_rmse_norm": repr(row["val_rmse_norm"])})

    result = train(model, train_set, val_set, run.train, on_epoch=on_epoch)
    meta = run.to_dict()
    meta.update(
        {
            "train_maps": str(len(manifest.splits["train"])),
            "val_maps": str(len(manifest.splits["val"])),
            "initial_val_rmse_norm": repr(result.initial_val.rmse_norm),
            "best_epoch": str(result.best_epoch),
            "best_val_rmse_norm": repr(result.best_val.rmse_norm),
            "best_val_rmse_db": repr(result.best_val.rmse_db),
            "best_val_nmse": repr(result.best_val.nmse),
        }
    )
    (out / "run.txt").write_text(dump_kv(meta), encoding="utf-8")
    print(
        f"best epoch {result.best_epoch}: val RMSE {result.best_val.rmse_norm:.5f} "
        f"({result.best_val.rmse_db:.3f} dB), initial {result.initial_val.rmse_norm:.5f}"
    )
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    if args.group and GroupSpec.parse(args.group) != model.spec:
        raise UsageError(f"checkpoint is {model.spec}, expected {args.group.upper()}")
    manifest = D.DatasetManifest.load(args.manifest)
    if model.config.with_cars and not manifest.cars:
        raise UsageError("checkpoint expects car grids (3 input channels) but the manifest has none")
    samples = D.load_dataset(manifest, args.split)
    rows: list = []
    rep = evaluate(model, samples, mask_buildings=args.mask_buildings, per_sample=rows)
    print(f"split={args.split} samples={len(samples)} pixels={rep.n_pixels}")
    print(f"rmse_norm={rep.rmse_norm!r}")
    print(f"rmse_db={rep.rmse_db!r}")
    print(f"nmse={rep.nmse!r}")
    if args.out:
        out = _out_dir(args.out)
        with open(out / f"eval_{args.split}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["map", "tx_x", "tx_y", "sse", "n_pixels", "rmse_norm"])
            for r in rows:
                w.writerow([r.map_id, r.tx[1], r.tx[0], repr(r.sse), r.n_pixels, repr(r.rmse)])
        with open(out / f"eval_{args.split}_summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rmse_norm", "rmse_db", "nmse", "n_pixels"])
            w.writerow([repr(rep.rmse_norm), repr(rep.rmse_db), repr(rep.nmse), rep.n_pixels])
    if args.max_rmse is not None and rep.rmse_norm > args.max_rmse:
        print(f"FAIL: rmse_norm {rep.rmse_norm:.5f} exceeds {args.max_rmse}", file=sys.stderr)
        return 1
    return 0


def _parse_tx(s: str) -> tuple[int, int]:
    try:
        x, y = (int(v) for v in s.split(","))
    except ValueError as e:
        raise UsageError(f"--tx must be X,Y integers, got {s!r}") from e
    return x, y


def predict_map(model, layout: np.ndarray, tx_xy: tuple[int, int], cars: np.ndarray | None = None) -> np.ndarray:
    H, W = layout.shape
    x, y = tx_xy
    if not (0 <= x < W and 0 <= y < H):
        raise UsageError(f"transmitter {tx_xy} outside the {W}x{H} layout")
    buildings = (layout >= 128).astype(np.uint8)
    sample = D.Sample(buildings, (y, x), np.zeros((H, W), np.float32),
                      None if cars is None else (cars >= 128).astype(np.uint8))
    inp = D.encode_input(sample, model.config.with_cars)[None]
    return model(inp)[0, 0]


def to_gray(pred: np.ndarray) -> np.ndarray:
    return np.rint(255.0 * np.clip(pred, 0.0, 1.0)).astype(np.uint8)


def cmd_predict(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    layout = D.read_gray(args.layout)
    cars = D.read_gray(args.cars) if args.cars else None
    if model.config.with_cars and cars is None:
        raise UsageError("checkpoint expects a car grid; pass --cars")
    pred = predict_map(model, layout, _parse_tx(args.tx), cars)
    gray = to_gray(pred)
    if args.mask_buildings:
        gray[layout >= 128] = 0
    out = Path(args.out)
    _out_dir(str(out.parent) if str(out.parent) else ".")
    D.write_gray(out, gray)
    print(f"wrote {gray.shape[1]}x{gray.shape[0]} map to {out}")
    return 0


def cmd_verify(args) -> int:
    from . import layers
    from .verify import report_dict, run_all

    spec = GroupSpec.parse(args.group)
    if args.inject_fault:
        with layers.inject_fiber_fault():
            results = run_all(spec, args.full, args.size)
    else:
        results = run_all(spec, args.full, args.size)
    rep = report_dict(spec, results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:32s} max_err={r.max_error:.3e} tol={r.tolerance:g} ({r.seconds:.2f}s)")
        if args.full and r.name.startswith("gradient_check"):
            for k, v in r.details.items():
                print(f"        {k:28s} {v:.3e}")
    if args.out:
        out = _out_dir(args.out)
        (out / f"verify_{spec.name}.json").write_text(json.dumps(rep, indent=2, default=float))
    if not rep["passed"]:
        print("FAILED: " + ", ".join(r.name for r in results if not r.passed), file=sys.stderr)
        return 1
    return 0


def cmd_params(args) -> int:
    from .model import ModelConfig

    cfg = ModelConfig(spec=GroupSpec.parse(args.group), with_cars=args.with_cars,
                      width_scale=Fraction(args.width_scale))
    model = build(cfg)
    for row in model.param_table():
        print(f"{row['name']:16s} {row['type']:6s} {row['in']:5d} -> {row['out']:5d}  {row['params']:>10d}")
    print(f"total {model.count_params()}")
    return 0


# ---------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gequnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic toy dataset")
    s.add_argument("--maps", type=int, required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--tx-per-map", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", help="train,val,test map counts (default 5:1:1)")
    s.add_argument("--format", choices=("png", "pgm"), default="png")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config")
    s.add_argument("--group", choices=GROUP_CHOICES)
    s.add_argument("--manifest")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--width-scale")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--group", choices=GROUP_CHOICES, help="fail unless the checkpoint uses this group")
    s.add_argument("--mask-buildings", action="store_true")
    s.add_argument("--max-rmse", type=float, help="exit 1 if normalized RMSE exceeds this")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="predict a radio map for one layout")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--layout", required=True)
    s.add_argument("--cars")
    s.add_argument("--tx", required=True, help="X,Y pixel (X = column)")
    s.add_argument("--mask-buildings", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("verify", help="run the equivariance/gradient/parameter checks")
    s.add_argument("--group", choices=GROUP_CHOICES, default="c4")
    s.add_argument("--full", action="store_true", help="add the end-to-end float64 gradient check")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    s.add_argument("--out")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("params", help="print the per-layer parameter table")
    s.add_argument("--group", choices=GROUP_CHOICES, default="c4")
    s.add_argument("--width-scale", default="1")
    s.add_argument("--with-cars", action="store_true")
    s.set_defaults(func=cmd_params)
    return p


def _limit_threads():
    n = os.environ.get("GEQUNET_THREADS")
    if not n:
        return None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return None
    return threadpool_limits(int(n))


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    _limit_threads()
    try:
        return args.func(args)
    except (UsageError, ConfigError, UnsupportedGroupError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (D.DatasetError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted; last.ckpt holds the last completed epoch", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
