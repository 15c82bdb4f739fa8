"""``photoproxy`` command line: one subcommand per pipeline block.

Every command accepts ``--config file.json``; explicit flags override the
file, unknown keys are rejected, and the merged configuration is written
next to the outputs.  Exit codes: 0 success, 2 config/validation error,
3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import replace
from datetime import datetime
from pathlib import Path

import numpy as np

from . import classifier as clf
from . import dncnn, evaluation
from .core_image import load_image, save_image, to_grayscale
from .degrade import (DegradationConfig, DegradedPair, calibrate_severity, generate_paired_corpus,
                      list_sources)
from .geometry import CornerQuad, load_corners, rectify
from .metrics import mean_ssim, psnr
from .nn import NumericalError

log = logging.getLogger("photoproxy")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def _degrade_defaults() -> dict:
    return DegradationConfig.screen_photo().to_dict()


def _train_defaults(**overrides) -> dict:
    return {**dncnn.TrainConfig().to_dict(), **overrides}


DEFAULTS = {
    "make-dataset": {"out": None, "n_benign": 2028, "n_malignant": 834, "image_size": 64, "seed": 0},
    "simulate": {"src": None, "out": None, "n": 50, "target_psnr": None, "calib_count": 50,
                 "degrade": _degrade_defaults()},
    "calibrate": {"src": None, "out": None, "target_psnr": 14.5, "calib_count": 50,
                  "degrade": _degrade_defaults()},
    "rectify": {"photo": None, "corners": None, "width": None, "height": None, "out": None},
    "restore": {"checkpoint": None, "input": None, "out": None, "tile": 128},
    "train-restorer": {"manifest": None, "out": None, "depth": 8, "width": 48, "holdout": 0,
                       "train": _train_defaults()},
    "train-classifier": {"dataset": None, "out": None, "split_seed": 0, "widths": [8, 16, 32],
                         "train": _train_defaults(epochs=15, batch_size=32),
                         "augment": clf.AugmentConfig().to_dict()},
    "metrics": {"a": None, "b": None},
    "evaluate": {"restorer": None, "dataset": None, "out": None, "plan": "10x3", "seed": 0,
                 "n_benign": 425, "n_malignant": 175, "image_size": 64, "dataset_seed": 1,
                 "widths": [8, 16, 32], "jobs": 1, "deterministic": True,
                 "degrade": _degrade_defaults(),
                 "train": _train_defaults(epochs=15, batch_size=32),
                 "augment": clf.AugmentConfig().to_dict()},
}
SECTIONS = ("degrade", "train", "augment")


# ---------------------------------------------------------------------------
# configuration

def _merge(defaults: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key!r} must be an object")
            out[key] = _merge(defaults[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def effective_config(command: str, args: argparse.Namespace) -> dict:
    cfg = DEFAULTS[command]
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
        cfg = _merge(cfg, file_cfg, "")
    else:
        cfg = copy.deepcopy(cfg)
    flags = {k: v for k, v in vars(args).items()
             if k not in ("command", "config", "func", "verbose") and v is not None}
    for key, value in flags.items():
        section, _, name = key.partition("__")
        if name:
            cfg = _merge(cfg, {section: {name: value}}, "")
        else:
            cfg = _merge(cfg, {key: value}, "")
    return cfg


def _require(cfg: dict, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join(missing)}")


def _section(cls, cfg: dict, name: str):
    try:
        return cls.from_dict(cfg[name])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} settings: {exc}") from exc


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "effective_config.json", cfg)
    return out


def _echo_next_to(path: Path, cfg: dict) -> None:
    _write_json(path.with_name(path.name + ".config.json"), cfg)


# ---------------------------------------------------------------------------
# commands

def cmd_make_dataset(cfg: dict) -> int:
    _require(cfg, "out")
    out = _out_dir(cfg)
    ds = clf.synth_lesion_dataset(cfg["n_benign"], cfg["n_malignant"], cfg["image_size"], cfg["seed"])
    (out / "images").mkdir(exist_ok=True)
    entries = []
    for i, (img, label) in enumerate(zip(ds.images, ds.labels)):
        rel = f"images/{i:05d}.png"
        save_image(img, out / rel)
        entries.append({"path": rel, "label": int(label)})
    _write_json(out / "dataset.json", {"provenance": ds.provenance, "images": entries})
    print(f"wrote {len(entries)} images to {out}")
    return EXIT_OK


def load_dataset_manifest(path) -> clf.LabeledDataset:
    """Read ``{"images": [{"path", "label"}, ...]}``; paths are relative to the manifest."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
        entries = data["images"]
        paths = [(path.parent / e["path"]).resolve() for e in entries]
        labels = [int(e["label"]) for e in entries]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: malformed dataset manifest ({exc})") from exc
    images = [to_grayscale(load_image(p)) for p in paths]
    return clf.LabeledDataset(images, labels, str(path.resolve()), [str(p) for p in paths])


def cmd_calibrate(cfg: dict) -> int:
    _require(cfg, "src", "out")
    base = _section(DegradationConfig, cfg, "degrade")
    paths = list_sources(cfg["src"])[: cfg["calib_count"]]
    if not paths:
        raise ConfigError(f"no PNG/PGM images in {cfg['src']}")
    corpus = [to_grayscale(load_image(p)) for p in paths]
    calibrated = calibrate_severity(corpus, float(cfg["target_psnr"]), base)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    calibrated.save(out)
    _echo_next_to(out, cfg)
    print(f"noise_sigma: {calibrated.noise_sigma!r}")
    return EXIT_OK


def cmd_simulate(cfg: dict) -> int:
    _require(cfg, "src", "out")
    deg = _section(DegradationConfig, cfg, "degrade")
    paths = list_sources(cfg["src"])
    if cfg["n"] > 0 and not paths:
        raise ConfigError(f"no PNG/PGM images in {cfg['src']}")
    if cfg["target_psnr"] is not None and paths:
        corpus = [to_grayscale(load_image(p)) for p in paths[: cfg["calib_count"]]]
        deg = calibrate_severity(corpus, float(cfg["target_psnr"]), deg)
    out = _out_dir(cfg)
    deg.save(out / "degradation.json")
    pairs = generate_paired_corpus(cfg["src"], deg, cfg["n"]) if cfg["n"] > 0 else []
    (out / "clean").mkdir(exist_ok=True)
    (out / "photo").mkdir(exist_ok=True)
    entries, values = [], []
    for i, pair in enumerate(pairs):
        clean_rel, photo_rel = f"clean/{i:05d}.png", f"photo/{i:05d}.png"
        save_image(pair.clean, out / clean_rel)
        save_image(pair.photo, out / photo_rel)
        entries.append({"clean": clean_rel, "photo": photo_rel, "corners": pair.true_corners.to_list(),
                        "seed": pair.config_used.seed, "source": str(Path(pair.source).resolve())})
        values.append(psnr(pair.clean, pair.rectified().photo))
    _write_json(out / "manifest.json", {"degradation": deg.to_dict(), "pairs": entries})
    finite = [v for v in values if np.isfinite(v)]
    mean = f"{np.mean(finite):.4f} dB" if finite else "n/a"
    print(f"pairs: {len(pairs)}, mean prior PSNR: {mean}")
    return EXIT_OK


def load_pair_manifest(path) -> list[DegradedPair]:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
        deg = DegradationConfig.from_dict(data["degradation"])
        entries = data["pairs"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: malformed pair manifest ({exc})") from exc
    root = path.parent.resolve()
    pairs = []
    for e in entries:
        pairs.append(DegradedPair(
            to_grayscale(load_image(root / e["clean"])), to_grayscale(load_image(root / e["photo"])),
            CornerQuad.from_points(e["corners"]), replace(deg, seed=e["seed"]),
            source=str(e["source"])))
    return pairs


def cmd_rectify(cfg: dict) -> int:
    _require(cfg, "photo", "corners", "out")
    photo = load_image(cfg["photo"])
    corners = load_corners(cfg["corners"])
    h, w = photo.shape[:2]
    out_w = int(cfg["width"] or w)
    out_h = int(cfg["height"] or h)
    out = Path(cfg["out"])
    save_image(rectify(photo, corners, out_w, out_h), out)
    _echo_next_to(out, cfg)
    return EXIT_OK


def cmd_restore(cfg: dict) -> int:
    _require(cfg, "checkpoint", "input", "out")
    model = dncnn.load_checkpoint(cfg["checkpoint"])
    img = to_grayscale(load_image(cfg["input"]))
    out = Path(cfg["out"])
    save_image(dncnn.restore(model, img, tile=int(cfg["tile"])), out)
    _echo_next_to(out, cfg)
    return EXIT_OK


def cmd_train_restorer(cfg: dict) -> int:
    _require(cfg, "manifest", "out")
    train_cfg = _section(dncnn.TrainConfig, cfg, "train")
    pairs = [p.rectified() for p in load_pair_manifest(cfg["manifest"])]
    holdout = int(cfg["holdout"])
    if holdout >= len(pairs):
        raise ConfigError("holdout leaves no training pairs")
    train_pairs, test_pairs = (pairs[:-holdout], pairs[-holdout:]) if holdout else (pairs, [])
    out = _out_dir(cfg)

    def progress(epoch, loss):
        print(f"epoch {epoch + 1}/{train_cfg.epochs}: loss {loss:.6g}", flush=True)

    model, history = dncnn.train(train_pairs, train_cfg, cfg["depth"], cfg["width"], progress=progress)
    dncnn.save_checkpoint(model, out / "restorer.ckpt")
    _write_json(out / "provenance.json", list(model.provenance))
    _write_json(out / "history.json", [float(h) for h in history])
    rows = evaluation.quality_table(train_pairs, model, "train")
    if test_pairs:
        rows += evaluation.quality_table(test_pairs, model, "test")
    evaluation.emit_report(evaluation.EvalReport(rows, []), out)
    return EXIT_OK


def _load_restorer(path) -> dncnn.DnCnnModel:
    model = dncnn.load_checkpoint(path)
    prov = Path(path).with_name("provenance.json")
    if prov.is_file():
        model.provenance = tuple(json.loads(prov.read_text()))
    return model


def cmd_train_classifier(cfg: dict) -> int:
    _require(cfg, "dataset", "out")
    train_cfg = _section(dncnn.TrainConfig, cfg, "train")
    aug = _section(clf.AugmentConfig, cfg, "augment")
    ds = load_dataset_manifest(cfg["dataset"])
    spec = evaluation.make_cv_splits(len(ds), evaluation.CvPlan(2, 1, cfg["split_seed"]), ds.labels)[0]
    out = _out_dir(cfg)
    model = clf.train_classifier(ds.subset(spec.train_idx), ds.subset(spec.valid_idx), train_cfg, aug,
                                 tuple(cfg["widths"]))
    clf.save_classifier(model, out / "classifier.ckpt")
    test = ds.subset(spec.test_idx)
    test_auc = evaluation.auroc(clf.predict_scores(model, test.images), test.labels)
    _write_json(out / "training.json", {"valid_auroc_history": model.valid_history, "test_auroc": test_auc})
    print(f"test AUROC: {test_auc:.4f}")
    return EXIT_OK


def cmd_metrics(cfg: dict) -> int:
    _require(cfg, "a", "b")
    a = to_grayscale(load_image(cfg["a"]))
    b = to_grayscale(load_image(cfg["b"]))
    print(f"PSNR: {round(psnr(a, b), 4)}, MSSIM: {round(mean_ssim(a, b), 6)}")
    return EXIT_OK


def cmd_evaluate(cfg: dict) -> int:
    _require(cfg, "restorer")
    if cfg["out"] is None:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        cfg["out"] = str(Path("runs") / f"{stamp}_seed{cfg['seed']}")
    try:
        plan = evaluation.CvPlan.parse(cfg["plan"], cfg["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    deg = _section(DegradationConfig, cfg, "degrade")
    train_cfg = _section(dncnn.TrainConfig, cfg, "train")
    aug = _section(clf.AugmentConfig, cfg, "augment")
    if cfg["dataset"]:
        ds = load_dataset_manifest(cfg["dataset"])
    else:
        ds = clf.synth_lesion_dataset(cfg["n_benign"], cfg["n_malignant"], cfg["image_size"],
                                      cfg["dataset_seed"])
    restorer = _load_restorer(cfg["restorer"])
    jobs = 1 if cfg["deterministic"] else int(cfg["jobs"])
    out = _out_dir(cfg)

    def progress(row):
        print(f"split {row.split} repeat {row.repeat}: dicom {row.auroc_dicom:.4f} "
              f"photo {row.auroc_photo:.4f} restored {row.auroc_restored:.4f}", flush=True)

    report = evaluation.run_end_to_end(ds, plan, deg, restorer, train_cfg, aug, tuple(cfg["widths"]),
                                       jobs=jobs, progress=progress)
    evaluation.emit_report(report, out)
    s = report.summary
    print(f"mean AUROC: dicom {s['mean_auroc_dicom']:.4f}, photo {s['mean_auroc_photo']:.4f}, "
          f"restored {s['mean_auroc_restored']:.4f}")
    return EXIT_OK


COMMANDS = {
    "make-dataset": cmd_make_dataset,
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "rectify": cmd_rectify,
    "restore": cmd_restore,
    "train-restorer": cmd_train_restorer,
    "train-classifier": cmd_train_classifier,
    "metrics": cmd_metrics,
    "evaluate": cmd_evaluate,
}


# ---------------------------------------------------------------------------
# argument parsing

def _add_train_flags(p):
    p.add_argument("--epochs", dest="train__epochs", type=int)
    p.add_argument("--lr", dest="train__learning_rate", type=float)
    p.add_argument("--batch-size", dest="train__batch_size", type=int)
    p.add_argument("--train-seed", dest="train__seed", type=int)


def _add_degrade_flags(p):
    p.add_argument("--noise-sigma", dest="degrade__noise_sigma", type=float)
    p.add_argument("--keystone", dest="degrade__keystone_strength", type=float)
    p.add_argument("--degrade-seed", dest="degrade__seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="photoproxy", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file with settings (flags take precedence)")
        return p

    p = command("make-dataset", "write a synthetic labeled lesion dataset")
    p.add_argument("--out")
    p.add_argument("--n-benign", dest="n_benign", type=int)
    p.add_argument("--n-malignant", dest="n_malignant", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--seed", type=int)

    p = command("simulate", "photograph-simulate a directory of images")
    p.add_argument("--src")
    p.add_argument("--out")
    p.add_argument("--n", type=int)
    p.add_argument("--target-psnr", dest="target_psnr", type=float)
    p.add_argument("--calib-count", dest="calib_count", type=int)
    _add_degrade_flags(p)

    p = command("calibrate", "fit noise_sigma to a target mean prior PSNR")
    p.add_argument("--src")
    p.add_argument("--out", help="output DegradationConfig JSON")
    p.add_argument("--target-psnr", dest="target_psnr", type=float)
    p.add_argument("--calib-count", dest="calib_count", type=int)
    _add_degrade_flags(p)

    p = command("rectify", "perspective-correct a photo from four corners")
    p.add_argument("--photo")
    p.add_argument("--corners", help="JSON [[x,y]x4] in tl,tr,br,bl order")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--out")

    p = command("restore", "apply a trained restorer to an image")
    p.add_argument("--checkpoint")
    p.add_argument("--input")
    p.add_argument("--out")
    p.add_argument("--tile", type=int)

    p = command("train-restorer", "train the denoising CNN on a simulate manifest")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--depth", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--holdout", type=int)
    p.add_argument("--patch-size", dest="train__patch_size", type=int)
    _add_train_flags(p)

    p = command("train-classifier", "train the lesion classifier on clean images")
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--split-seed", dest="split_seed", type=int)
    _add_train_flags(p)

    p = command("metrics", "PSNR and mean SSIM of an image pair")
    p.add_argument("a", nargs="?")
    p.add_argument("b", nargs="?")

    p = command("evaluate", "cross-validated AUROC on clean / photo / restored images")
    p.add_argument("--restorer")
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--plan")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--deterministic", action="store_true", default=None)
    p.add_argument("--n-benign", dest="n_benign", type=int)
    p.add_argument("--n-malignant", dest="n_malignant", type=int)
    p.add_argument("--degrade-config", dest="degrade_config",
                   help="DegradationConfig JSON, e.g. from calibrate")
    _add_degrade_flags(p)
    _add_train_flags(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    degrade_file = getattr(args, "degrade_config", None)
    if hasattr(args, "degrade_config"):
        del args.degrade_config
    try:
        cfg = effective_config(args.command, args)
        if degrade_file:
            try:
                file_deg = DegradationConfig.load(degrade_file).to_dict()
            except (json.JSONDecodeError, TypeError, ValueError) as exc:
                raise ConfigError(f"{degrade_file}: invalid degradation config ({exc})") from exc
            flagged = {k.partition("__")[2]: v for k, v in vars(args).items()
                       if k.startswith("degrade__") and v is not None}
            cfg["degrade"] = {**file_deg, **flagged}
        return COMMANDS[args.command](cfg)
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, dncnn.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
