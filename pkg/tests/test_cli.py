import csv
import math
import re

import numpy as np
import pytest

from gequnet import data as D
from gequnet.cli import main
from gequnet.groups import GroupSpec
from gequnet.model import ModelConfig, build, read_checkpoint_header, save_checkpoint

CONFIG = """\
# tiny toy run
manifest = toy/manifest.txt
group = c4
width_scale = 1/8
max_epochs = 3
learning_rate = 2e-3
batch_size = 2
seed = 3
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--maps", "7", "--size", "32", "--tx-per-map", "2", "--seed", "1", "--out", str(root / "toy")]) == 0
    (root / "run.cfg").write_text(CONFIG)
    assert main(["train", "--config", str(root / "run.cfg"), "--out", str(root / "run")]) == 0
    return root


def test_synth_writes_maps_and_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["synth", "--maps", "7", "--size", "64", "--seed", "5", "--out", str(tmp_path / d)]) == 0
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    assert len(list((tmp_path / "a" / "buildings").iterdir())) == 7
    for f in files_a:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    man = D.DatasetManifest.load(tmp_path / "a" / "manifest.txt")
    assert len(D.load_dataset(man)) == 7


def test_synth_unwritable_path(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "--maps", "2", "--size", "32", "--out", str(blocker / "sub")]) == 2
    assert "cannot write" in capsys.readouterr().err


def test_train_outputs(workdir):
    run = workdir / "run"
    assert {"best.ckpt", "last.ckpt", "curves.csv", "run.txt"} <= {p.name for p in run.iterdir()}
    text = (run / "run.txt").read_text()
    assert "group = c4" in text and "seed = 3" in text and "width_scale = 1/8" in text
    rows = list(csv.DictReader(open(run / "curves.csv")))
    assert [r["epoch"] for r in rows] == ["1", "2", "3"]
    assert read_checkpoint_header(run / "best.ckpt")["group"] == "c4"


def test_train_group_flag_overrides(workdir, tmp_path):
    out = tmp_path / "d4"
    assert main(["train", "--config", str(workdir / "run.cfg"), "--group", "d4", "--epochs", "1", "--out", str(out)]) == 0
    header = read_checkpoint_header(out / "best.ckpt")
    assert GroupSpec.parse(header["group"]) == GroupSpec("dihedral", 4)


def test_train_missing_config(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path / "o")]) == 2
    assert "config file not found" in capsys.readouterr().err


def test_train_bad_config_key(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("learning_rat = 1\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "o")]) == 2
    assert "unknown config keys" in capsys.readouterr().err


def _printed(out):
    return {k: float(v) for k, v in re.findall(r"^(rmse_norm|rmse_db|nmse)=(\S+)$", out, re.M)}


def test_eval_reproduces_run_metadata(workdir, capsys):
    capsys.readouterr()
    rc = main(["eval", "--checkpoint", str(workdir / "run" / "best.ckpt"),
               "--manifest", str(workdir / "toy" / "manifest.txt"), "--split", "val", "--out", str(workdir / "ev")])
    assert rc == 0
    printed = _printed(capsys.readouterr().out)
    meta = dict(line.split(" = ", 1) for line in (workdir / "run" / "run.txt").read_text().splitlines())
    assert printed["rmse_norm"] == float(meta["best_val_rmse_norm"])
    assert printed["rmse_db"] == pytest.approx(80 * printed["rmse_norm"], rel=1e-12)
    rows = list(csv.DictReader(open(workdir / "ev" / "eval_val.csv")))
    sse = math.fsum(float(r["sse"]) for r in rows)
    n = sum(int(r["n_pixels"]) for r in rows)
    assert math.sqrt(sse / n) == pytest.approx(printed["rmse_norm"], rel=1e-9)


def test_eval_max_rmse_and_group_mismatch(workdir, capsys):
    args = ["eval", "--checkpoint", str(workdir / "run" / "best.ckpt"), "--manifest", str(workdir / "toy" / "manifest.txt")]
    assert main(args + ["--max-rmse", "0"]) == 1
    assert main(args + ["--group", "d8"]) == 2
    assert "expected D8" in capsys.readouterr().err


def test_eval_channel_mismatch(workdir, tmp_path, capsys):
    model = build(ModelConfig(spec=GroupSpec.parse("c2"), with_cars=True, width_scale=1))
    save_checkpoint(model, tmp_path / "cars.ckpt")
    assert main(["eval", "--checkpoint", str(tmp_path / "cars.ckpt"), "--manifest", str(workdir / "toy" / "manifest.txt")]) == 2
    assert "car grids" in capsys.readouterr().err


def test_eval_perfect_oracle(tmp_path, capsys):
    (tmp_path / "b").mkdir()
    (tmp_path / "t").mkdir()
    D.write_gray(tmp_path / "b" / "m.png", np.zeros((32, 32), np.uint8))
    D.write_gray(tmp_path / "t" / "m_0.png", np.full((32, 32), 128, np.uint8))
    (tmp_path / "manifest.txt").write_text(
        "setting = DPM_noCars\nsize = 32\nbuildings = b/{map}.png\ntarget = t/{map}_{tx}.png\n"
        "map m : 3,4\nsplit test : m\n"
    )
    from fractions import Fraction

    model = build(ModelConfig(spec=GroupSpec.parse("c2"), width_scale=Fraction(1, 16)))
    for layer in model.layers:
        layer.weights[:] = 0
    model.layers[-1].bias[:] = np.float32(128) / np.float32(255)
    save_checkpoint(model, tmp_path / "oracle.ckpt")
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(tmp_path / "oracle.ckpt"), "--manifest", str(tmp_path / "manifest.txt")]) == 0
    assert _printed(capsys.readouterr().out) == {"rmse_norm": 0.0, "rmse_db": 0.0, "nmse": 0.0}


def test_predict_shape_rotation_and_mask(workdir, tmp_path):
    ckpt = str(workdir / "run" / "best.ckpt")
    layout = D.read_gray(workdir / "toy" / "buildings" / "000.png")
    free = np.argwhere(layout < 128)
    y, x = (int(v) for v in free[len(free) // 3])
    D.write_gray(tmp_path / "rot.png", np.rot90(layout))
    assert main(["predict", "--checkpoint", ckpt, "--layout", str(workdir / "toy" / "buildings" / "000.png"),
                 "--tx", f"{x},{y}", "--out", str(tmp_path / "p.png")]) == 0
    W = layout.shape[1]
    assert main(["predict", "--checkpoint", ckpt, "--layout", str(tmp_path / "rot.png"),
                 "--tx", f"{y},{W - 1 - x}", "--out", str(tmp_path / "p_rot.png")]) == 0
    a = D.read_gray(tmp_path / "p.png").astype(int)
    b = D.read_gray(tmp_path / "p_rot.png").astype(int)
    assert a.shape == layout.shape
    assert np.abs(np.rot90(a) - b).max() <= 1
    assert main(["predict", "--checkpoint", ckpt, "--layout", str(workdir / "toy" / "buildings" / "000.png"),
                 "--tx", f"{x},{y}", "--mask-buildings", "--out", str(tmp_path / "m.png")]) == 0
    masked = D.read_gray(tmp_path / "m.png")
    assert not masked[layout >= 128].any()
    np.testing.assert_array_equal(masked[layout < 128], a[layout < 128])


def test_predict_tx_outside(workdir, tmp_path, capsys):
    layout = str(workdir / "toy" / "buildings" / "000.png")
    assert main(["predict", "--checkpoint", str(workdir / "run" / "best.ckpt"), "--layout", layout,
                 "--tx", "32,0", "--out", str(tmp_path / "p.png")]) == 2
    assert "outside" in capsys.readouterr().err


def test_verify_pass_and_report(tmp_path):
    assert main(["verify", "--group", "d2", "--size", "32", "--out", str(tmp_path)]) == 0
    import json

    rep = json.loads((tmp_path / "verify_d2.json").read_text())
    assert rep["passed"] and {s["name"] for s in rep["suites"]} >= {"group_axioms[d2]", "layer_equivariance[d2]", "model_equivariance[d2]"}


def test_verify_fault_injection_fails(tmp_path, capsys):
    assert main(["verify", "--group", "c4", "--size", "32", "--inject-fault"]) == 1
    err = capsys.readouterr().err
    assert "equivariance" in err


def test_verify_full_reports_per_layer(capsys):
    assert main(["verify", "--group", "c2", "--size", "32", "--full"]) == 0
    out = capsys.readouterr().out
    assert "gradient_check" in out and "enc1.conv1" in out


def test_params_command(capsys):
    assert main(["params", "--group", "d4"]) == 0
    assert capsys.readouterr().out.strip().endswith("total 18547599")
