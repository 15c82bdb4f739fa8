import json

import numpy as np
import pytest

from photoproxy.cli import main
from photoproxy.core_image import save_image


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["make-dataset", "--out", str(root / "ds"), "--n-benign", "12", "--n-malignant", "8",
                 "--image-size", "32", "--seed", "2"]) == 0
    assert main(["simulate", "--src", str(root / "ds" / "images"), "--n", "6", "--out", str(root / "sim")]) == 0
    return root


def test_metrics_identical(workspace, capsys):
    img = str(workspace / "ds" / "images" / "00000.png")
    assert main(["metrics", img, img]) == 0
    assert capsys.readouterr().out.strip() == "PSNR: inf, MSSIM: 1.0"


def test_simulate_manifest(workspace):
    manifest = json.loads((workspace / "sim" / "manifest.json").read_text())
    assert len(manifest["pairs"]) == 6
    assert [p["seed"] for p in manifest["pairs"]] == list(range(6))
    assert (workspace / "sim" / "effective_config.json").is_file()


def test_simulate_errors(workspace, tmp_path, capsys):
    assert main(["simulate", "--src", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 3
    assert "missing" in capsys.readouterr().err
    assert main(["simulate", "--src", str(workspace / "ds" / "images"), "--n", "0", "--out", str(tmp_path / "z")]) == 0
    assert json.loads((tmp_path / "z" / "manifest.json").read_text())["pairs"] == []


def test_simulate_with_target(workspace, tmp_path, capsys):
    assert main(["simulate", "--src", str(workspace / "ds" / "images"), "--n", "4", "--target-psnr", "13.0",
                 "--calib-count", "20", "--out", str(tmp_path / "t")]) == 0
    out = capsys.readouterr().out
    mean = float(out.split("mean prior PSNR:")[1].split()[0])
    assert abs(mean - 13.0) < 1.0


def test_config_file_and_flag_precedence(workspace, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 3, "degrade": {"noise_sigma": 0.02, "seed": 40}}))
    out = tmp_path / "run"
    assert main(["simulate", "--config", str(cfg), "--src", str(workspace / "ds" / "images"), "--out", str(out),
                 "--n", "2"]) == 0
    eff = json.loads((out / "effective_config.json").read_text())
    assert eff["n"] == 2 and eff["degrade"]["noise_sigma"] == 0.02 and eff["degrade"]["seed"] == 40
    assert [p["seed"] for p in json.loads((out / "manifest.json").read_text())["pairs"]] == [40, 41]


def test_unknown_config_keys_rejected(workspace, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"degrade": {"noise_sigm": 0.1}}))
    assert main(["simulate", "--config", str(cfg), "--src", "x", "--out", str(tmp_path / "o")]) == 2
    cfg.write_text("{broken")
    assert main(["metrics", "--config", str(cfg), "a", "b"]) == 2


def test_rectify_paths(workspace, tmp_path):
    manifest = json.loads((workspace / "sim" / "manifest.json").read_text())
    pair = manifest["pairs"][0]
    corners = tmp_path / "c.json"
    corners.write_text(json.dumps(pair["corners"]))
    out = tmp_path / "r.png"
    photo = str(workspace / "sim" / pair["photo"])
    assert main(["rectify", "--photo", photo, "--corners", str(corners), "--width", "32", "--height", "32",
                 "--out", str(out)]) == 0
    assert out.is_file() and (tmp_path / "r.png.config.json").is_file()
    corners.write_text("[[0, 0], [1, 0]")
    assert main(["rectify", "--photo", photo, "--corners", str(corners), "--out", str(out)]) == 2
    corners.write_text(json.dumps([[0, 0], [10, 0], [0, 10], [10, 10]]))
    assert main(["rectify", "--photo", photo, "--corners", str(corners), "--out", str(out)]) == 2


def test_full_frame_rectify_is_identity(tmp_path, rng):
    img = rng.random((20, 30))
    save_image(img, tmp_path / "in.png")
    (tmp_path / "c.json").write_text(json.dumps([[0, 0], [29, 0], [29, 19], [0, 19]]))
    assert main(["rectify", "--photo", str(tmp_path / "in.png"), "--corners", str(tmp_path / "c.json"),
                 "--out", str(tmp_path / "out.png")]) == 0
    assert (tmp_path / "in.png").read_bytes() == (tmp_path / "out.png").read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_restore_and_errors(workspace, tmp_path):
    out = tmp_path / "r"
    args = ["train-restorer", "--manifest", str(workspace / "sim" / "manifest.json"), "--out", str(out),
            "--depth", "2", "--width", "2", "--epochs", "1", "--patch-size", "16", "--holdout", "2"]
    assert main(args) == 0
    for name in ("restorer.ckpt", "provenance.json", "quality_table.csv", "effective_config.json"):
        assert (out / name).is_file()
    restored = tmp_path / "restored.png"
    assert main(["restore", "--checkpoint", str(out / "restorer.ckpt"), "--input",
                 str(workspace / "ds" / "images" / "00001.png"), "--out", str(restored)]) == 0
    assert main(["restore", "--checkpoint", str(out / "provenance.json"), "--input",
                 str(workspace / "ds" / "images" / "00001.png"), "--out", str(restored)]) == 3
    # a diverging optimizer is reported as a numerical failure
    assert main(args[:-6] + ["--depth", "2", "--width", "2", "--epochs", "3", "--patch-size", "16",
                             "--lr", "1e30", "--out", str(tmp_path / "nan")]) == 4


def test_evaluate_refuses_leaky_restorer(workspace, tmp_path):
    out = tmp_path / "r"
    assert main(["train-restorer", "--manifest", str(workspace / "sim" / "manifest.json"), "--out", str(out),
                 "--depth", "2", "--width", "2", "--epochs", "1", "--patch-size", "16"]) == 0
    assert main(["evaluate", "--restorer", str(out / "restorer.ckpt"), "--dataset",
                 str(workspace / "ds" / "dataset.json"), "--plan", "2x1", "--epochs", "1",
                 "--out", str(tmp_path / "e")]) == 2


def test_evaluate_plan_rows(workspace, tmp_path):
    out = tmp_path / "r"
    assert main(["train-restorer", "--manifest", str(workspace / "sim" / "manifest.json"), "--out", str(out),
                 "--depth", "2", "--width", "2", "--epochs", "1", "--patch-size", "16"]) == 0
    ev = tmp_path / "e"
    assert main(["evaluate", "--restorer", str(out / "restorer.ckpt"), "--n-benign", "14", "--n-malignant", "10",
                 "--plan", "2x3", "--epochs", "1", "--out", str(ev)]) == 0
    lines = (ev / "auroc_table.csv").read_text().splitlines()
    assert len(lines) == 1 + 6
    assert main(["evaluate", "--restorer", str(out / "restorer.ckpt"), "--plan", "bogus", "--out", str(ev)]) == 2


def test_train_classifier(workspace, tmp_path, capsys):
    out = tmp_path / "c"
    assert main(["train-classifier", "--dataset", str(workspace / "ds" / "dataset.json"), "--out", str(out),
                 "--epochs", "1"]) == 0
    assert (out / "classifier.ckpt").is_file()
    assert "test AUROC" in capsys.readouterr().out


def test_calibrate_command(workspace, tmp_path, capsys):
    out = tmp_path / "d.json"
    assert main(["calibrate", "--src", str(workspace / "ds" / "images"), "--target-psnr", "13.0",
                 "--calib-count", "10", "--out", str(out)]) == 0
    sigma = json.loads(out.read_text())["noise_sigma"]
    assert 0 <= sigma <= 0.5
    assert main(["calibrate", "--src", str(workspace / "ds" / "images"), "--target-psnr", "80",
                 "--out", str(out)]) == 2
