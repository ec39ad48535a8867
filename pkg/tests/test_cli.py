import json
import subprocess
import sys

import numpy as np
import pytest

from carnet.checkpoint import save_checkpoint
from carnet.cli import main
from carnet.data import read_image_u8, write_image, write_split
from carnet.model import CarNet, CarNetConfig

SMALL = "block_counts = 1,1,1\nstage_channels = 4,8,12,16\nufpb_channels = 4\ninput_size = 32,32\n"


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def small_cfg_file(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL)
    return p


@pytest.fixture
def synth_small(tmp_path):
    out = tmp_path / "syn"
    assert main(["gen-synth", "--out", str(out), "--count", "5", "--size", "32x32", "--seed", "3"]) == 0
    return out


@pytest.fixture
def trained(tmp_path, synth_small, small_cfg_file):
    out = tmp_path / "run"
    argv = ["train", "--data", str(synth_small), "--config", str(small_cfg_file), "--epochs", "1",
            "--out", str(out), "--checkpoint-every", "1"]
    assert main(argv) == 0
    return out / "ckpt_final.npz" if (out / "ckpt_final.npz").exists() else sorted(out.glob("*final*"))[0]


def test_gen_synth_split(tmp_path, capsys):
    out = tmp_path / "d"
    assert main(["gen-synth", "--out", str(out), "--count", "80", "--size", "32x32", "--seed", "7"]) == 0
    assert "64 train / 16 test" in capsys.readouterr().out
    assert len((out / "splits" / "train.txt").read_text().split()) == 64


def test_gen_synth_errors(tmp_path):
    assert main(["gen-synth", "--out", str(tmp_path / "d"), "--count", "0"]) == 1
    args = ["gen-synth", "--out", str(tmp_path / "e"), "--count", "2", "--size", "32x32"]
    assert main(args) == 0
    assert main(args) == 2
    before = tree_bytes(tmp_path / "e")
    assert main(args + ["--force"]) == 0
    assert tree_bytes(tmp_path / "e") == before


def test_unknown_flag_and_bad_size(tmp_path):
    assert main(["gen-synth", "--out", str(tmp_path), "--count", "2", "--bogus"]) == 1
    assert main(["analyze", "--input-size", "33x480"]) == 2
    assert main(["analyze", "--input-size", "banana"]) == 1


def test_analyze_orientation(capsys):
    assert main(["analyze", "--input-size", "320x480", "--csv"]) == 0
    a = capsys.readouterr().out.strip().splitlines()[-1]
    assert main(["analyze", "--input-size", "480x320", "--csv"]) == 0
    b = capsys.readouterr().out.strip().splitlines()[-1]
    assert a == b


def test_analyze_text_totals(capsys):
    assert main(["analyze"]) == 0
    out = capsys.readouterr().out
    assert "4.89" in out and "11.2" in out


def test_analyze_light_config(tmp_path, capsys):
    cfg = tmp_path / "light.cfg"
    cfg.write_text("block_counts = 4,2,1\nufpb_channels = 24\n")
    assert main(["analyze", "--config", str(cfg), "--input-size", "480x320"]) == 0
    out = capsys.readouterr().out
    assert "2.2" in out


def test_train_epochs_zero(tmp_path, synth_small):
    assert main(["train", "--data", str(synth_small), "--epochs", "0", "--out", str(tmp_path / "r")]) == 1


def test_train_manifest_defaults(tmp_path, trained):
    doc = json.loads((trained.parent / "run_manifest.json").read_text())
    tc = doc["train_config"]
    assert tc["lr"] == 3e-4 and tc["batch_size"] == 2 and tc["seed"] == 7
    assert (trained.parent / "log.csv").exists()


def test_train_bad_data(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--epochs", "1", "--out", str(tmp_path / "r")]) == 2


def test_eval_report(tmp_path, synth_small, trained):
    rep = tmp_path / "rep.json"
    argv = ["eval", "--data", str(synth_small), "--checkpoint", str(trained), "--report", str(rep),
            "--pr-csv", str(tmp_path / "pr.csv"), "--pr-svg", str(tmp_path / "pr.svg")]
    assert main(argv) == 0
    doc = json.loads(rep.read_text())
    assert len(doc["per_threshold"]) == 99
    assert {"threshold", "precision", "recall", "f1"} <= set(doc["per_threshold"][0])
    assert len((tmp_path / "pr.csv").read_text().strip().splitlines()) == 100
    first = rep.read_bytes()
    assert main(argv) == 0
    assert rep.read_bytes() == first


def test_eval_missing_checkpoint(tmp_path, synth_small):
    argv = ["eval", "--data", str(synth_small), "--checkpoint", str(tmp_path / "nope.npz"),
            "--report", str(tmp_path / "r.json")]
    assert main(argv) == 2


def test_eval_architecture_mismatch(tmp_path, synth_small, capsys):
    m = CarNet(CarNetConfig(block_counts=(1, 1, 1), stage_channels=(4, 8, 12, 16), ufpb_channels=4,
                            input_size=(32, 32)))
    save_checkpoint(tmp_path / "c.npz", m)
    blob = (tmp_path / "c.npz").read_bytes().replace(b"block_counts = 1,1,1", b"block_counts = 2,1,1")
    (tmp_path / "c.npz").write_bytes(blob)
    argv = ["eval", "--data", str(synth_small), "--checkpoint", str(tmp_path / "c.npz"),
            "--report", str(tmp_path / "r.json")]
    assert main(argv) == 2
    assert "stage2.rb1" in capsys.readouterr().err


def perfect_oracle(path, size=(32, 32)):
    """A checkpoint whose output is sigmoid(30) everywhere: every other weight is zero."""
    m = CarNet(CarNetConfig(block_counts=(1, 1, 1), stage_channels=(4, 8, 12, 16), ufpb_channels=4, input_size=size))
    for name, p in m.named_parameters():
        p.data[...] = 0.0
    dict(m.named_parameters())["dcb2.conv4.bias"].data[...] = 30.0
    save_checkpoint(path, m)


def test_eval_perfect_oracle(tmp_path):
    ds = tmp_path / "one"
    (ds / "images").mkdir(parents=True)
    (ds / "masks").mkdir()
    write_image(ds / "images" / "a.png", np.random.default_rng(0).integers(0, 256, (32, 32, 3), dtype=np.uint8))
    write_image(ds / "masks" / "a.png", np.full((32, 32), 255, np.uint8))
    write_split(ds, "train", [])
    write_split(ds, "test", ["a"])
    perfect_oracle(tmp_path / "oracle.npz")
    rep = tmp_path / "rep.json"
    assert main(["eval", "--data", str(ds), "--checkpoint", str(tmp_path / "oracle.npz"), "--report", str(rep)]) == 0
    doc = json.loads(rep.read_text())
    assert doc["ods"] == 1.0 and doc["ois"] == 1.0


def test_predict_size_and_determinism(tmp_path, trained):
    img = tmp_path / "in.png"
    write_image(img, np.random.default_rng(1).integers(0, 256, (37, 50, 3), dtype=np.uint8))
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    assert main(["predict", "--checkpoint", str(trained), "--image", str(img), "--out", str(a)]) == 0
    assert main(["predict", "--checkpoint", str(trained), "--image", str(img), "--out", str(b)]) == 0
    out = read_image_u8(a)
    assert out.shape == (37, 50) and out.dtype == np.uint8
    assert a.read_bytes() == b.read_bytes()


def test_predict_missing_checkpoint(tmp_path):
    img = tmp_path / "in.png"
    write_image(img, np.zeros((16, 16, 3), np.uint8))
    assert main(["predict", "--checkpoint", str(tmp_path / "x.npz"), "--image", str(img),
                 "--out", str(tmp_path / "o.png")]) == 2


def test_bench_smoke(small_cfg_file, capsys):
    assert main(["bench", "--config", str(small_cfg_file), "--iters", "3", "--warmup", "1"]) == 0
    fps = float(capsys.readouterr().out.split(": ")[1].split()[0])
    assert fps > 0
    assert main(["bench", "--config", str(small_cfg_file), "--iters", "0"]) == 1


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "carnet.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("carnet ")
