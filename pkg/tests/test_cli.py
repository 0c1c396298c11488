"""Command-line surface: every subcommand end to end on a tiny setup."""

import os

import numpy as np
import pytest

from deformunet.cli import main
from deformunet.engine import load_array
from deformunet.fileio import read_pgm

CONFIG_32 = """
# tiny optimization setup
patch_size = 1
block_pattern = KKDDKK
offsets_enabled = true
layers = 1
window = 8
downsample = 1
channels = 4,8,16,32,16,8
heads = 1,1,2,2,2,1
input_height = 32
input_width = 32
steps = 3
batch = 4
lr0 = 0.001
seed = 0
log_every = 1
mask_kind = gaussian1d
mask_ratio = 0.3
mask_seed = 5
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    out = root / "run"
    assert main(["phantom-gen", "--n", "6", "--size", "32", "--seed", "4",
                 "--out", str(data)]) == 0
    cfg_path = root / "train.cfg"
    cfg_path.write_text(CONFIG_32)
    assert main(["train", "--config", str(cfg_path), "--data", str(data),
                 "--out", str(out)]) == 0
    return root, data, out


def test_phantom_gen_outputs(workspace):
    root, data, out = workspace
    files = sorted(os.listdir(data))
    assert len(files) == 6
    img = load_array(data / files[0])
    assert img.shape == (32, 32)


def test_mask_gen_both_kinds(workspace, tmp_path):
    for kind in ("gaussian1d", "radial"):
        path = tmp_path / f"{kind}.dtns"
        assert main(["mask-gen", "--kind", kind, "--ratio", "0.3", "--size", "32",
                     "--seed", "2", "--out", str(path)]) == 0
        kept = load_array(path)
        assert kept.shape == (32, 32)
        assert set(np.unique(kept)) <= {0.0, 1.0}
        assert (tmp_path / f"{kind}.pgm").exists()


def test_undersample_command(workspace, tmp_path):
    root, data, out = workspace
    mask = tmp_path / "m.dtns"
    main(["mask-gen", "--kind", "gaussian1d", "--ratio", "0.4", "--size", "32",
          "--seed", "1", "--out", str(mask)])
    img = sorted(os.listdir(data))[0]
    xu = tmp_path / "xu.dtns"
    assert main(["undersample", "--image", str(data / img), "--mask", str(mask),
                 "--out", str(xu)]) == 0
    arr = load_array(xu)
    assert arr.shape == (32, 32)
    assert (tmp_path / "xu.pgm").exists()


def test_train_outputs(workspace):
    root, data, out = workspace
    assert (out / "model.ckpt").exists()
    assert (out / "model.ckpt.manifest").exists()
    assert (out / "model.ckpt.cfg").exists()
    log = (out / "train_log.txt").read_text().strip().splitlines()
    assert log[0] == "step, lr, loss, wallclock-ms"
    assert len(log) == 4  # header + 3 logged steps
    assert (out / "loss_curve.png").exists()
    assert (out / "train_metrics.csv").exists()
    assert (out / "train_metrics.png").exists()


def test_reconstruct_command(workspace, tmp_path):
    root, data, out = workspace
    mask = tmp_path / "m.dtns"
    main(["mask-gen", "--kind", "gaussian1d", "--ratio", "0.3", "--size", "32",
          "--seed", "5", "--out", str(mask)])
    img = sorted(os.listdir(data))[0]
    rec = tmp_path / "rec.dtns"
    assert main(["reconstruct", "--ckpt", str(out / "model.ckpt"),
                 "--image", str(data / img), "--mask", str(mask),
                 "--out", str(rec)]) == 0
    assert load_array(rec).shape == (32, 32)
    assert (tmp_path / "rec.pgm").exists()
    assert (tmp_path / "rec.png").exists()


def test_evaluate_command(workspace, tmp_path):
    root, data, out = workspace
    mask = tmp_path / "m.dtns"
    main(["mask-gen", "--kind", "gaussian1d", "--ratio", "0.3", "--size", "32",
          "--seed", "5", "--out", str(mask)])
    report = tmp_path / "report.csv"
    assert main(["evaluate", "--ckpt", str(out / "model.ckpt"), "--data", str(data),
                 "--mask", str(mask), "--report", str(report)]) == 0
    lines = report.read_text().strip().splitlines()
    assert lines[0] == "index, zf_psnr, zf_ssim, model_psnr, model_ssim"
    assert lines[-1].startswith("mean,")
    assert (tmp_path / "report.png").exists()


def test_macs_command(tmp_path, capsys):
    report = tmp_path / "macs.txt"
    assert main(["macs", "--preset", "KKDDKK-O-1", "--size", "256",
                 "--report", str(report)]) == 0
    text = report.read_text()
    assert "total_giga" in text
    total = float([l for l in text.splitlines() if l.startswith("total_giga")][0].split("=")[1])
    assert abs(total - 293.02) / 293.02 <= 0.10
    assert (tmp_path / "macs.png").exists()
    shown = capsys.readouterr().out
    assert "total" in shown


def test_inspect_command(workspace, tmp_path):
    root, data, out = workspace
    mask = tmp_path / "m.dtns"
    main(["mask-gen", "--kind", "gaussian1d", "--ratio", "0.3", "--size", "32",
          "--seed", "5", "--out", str(mask)])
    img = sorted(os.listdir(data))[0]
    xu = tmp_path / "xu.dtns"
    main(["undersample", "--image", str(data / img), "--mask", str(mask),
          "--out", str(xu)])
    exp = tmp_path / "explain"
    assert main(["inspect", "--ckpt", str(out / "model.ckpt"), "--image", str(xu),
                 "--block", "E3", "--layer", "0", "--head", "0", "--query", "4,4",
                 "--out", str(exp)]) == 0
    for name in ("reference_points.dtns", "offsets.dtns", "deformed_points.dtns",
                 "offset_field.dtns", "deformed_points_overlay.pgm", "index.txt",
                 "attention_heatmap.pgm", "attention_heatmap.png", "deformation.png"):
        assert (exp / name).exists(), name
    heat = read_pgm(exp / "attention_heatmap.pgm")
    assert heat.shape == (8, 8)  # E3 feature map of the 32x32 tiny model
