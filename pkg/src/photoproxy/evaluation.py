"""Experiment orchestration: CV splits, quality statistics, AUROC comparison,
and report files.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import classifier as clf
from . import dncnn
from .degrade import DegradationConfig, degrade
from .metrics import mean_ssim, psnr
from .roc import auroc

__all__ = [
    "CvPlan", "SplitSpec", "EvalReport", "ProvenanceError", "auroc", "make_cv_splits",
    "quality_table", "run_end_to_end", "emit_report", "load_report",
]

log = logging.getLogger(__name__)

QUALITY_COLUMNS = ("split", "count", "metric", "avg_prior", "std_prior", "avg_after", "std_after")
AUROC_COLUMNS = ("split", "repeat", "auroc_dicom", "auroc_photo", "auroc_restored")
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


class ProvenanceError(ValueError):
    pass


@dataclass(frozen=True)
class CvPlan:
    n_splits: int = 10
    repeats_per_split: int = 3
    base_seed: int = 0

    def __post_init__(self):
        if self.n_splits < 2 or self.repeats_per_split < 1:
            raise ValueError("need n_splits >= 2 and repeats_per_split >= 1")

    @classmethod
    def parse(cls, text: str, base_seed: int = 0) -> "CvPlan":
        """``"10x3"`` -> 10 splits, 3 repeats."""
        try:
            s, r = text.lower().split("x")
            return cls(int(s), int(r), base_seed)
        except ValueError as exc:
            raise ValueError(f"plan must look like '10x3', got {text!r}") from exc


@dataclass(frozen=True)
class SplitSpec:
    train_idx: tuple[int, ...]
    valid_idx: tuple[int, ...]
    test_idx: tuple[int, ...]
    seed: int


def make_cv_splits(n_items: int, plan: CvPlan, labels) -> list[SplitSpec]:
    """Stratified 80/10/10 train/valid/test partitions, one per split.

    Split ``k`` shuffles each class with seed ``base_seed + k``; every class
    contributes at least one item to validation and test.
    """
    labels = np.asarray(labels)
    if len(labels) != n_items:
        raise ValueError("labels length differs from n_items")
    if n_items < 10:
        raise ValueError("need at least 10 items for a train/valid/test split")
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("both classes must be present")
    counts = {c: int(np.sum(labels == c)) for c in classes}
    if min(counts.values()) < 3:
        raise ValueError(f"too few items per class for stratified splits: {counts}")
    specs = []
    for k in range(plan.n_splits):
        seed = plan.base_seed + k
        rng = np.random.default_rng(seed)
        train, valid, test = [], [], []
        for c in classes:
            idx = rng.permutation(np.flatnonzero(labels == c))
            n_test = max(1, int(round(SPLIT_FRACTIONS[2] * len(idx))))
            n_valid = max(1, int(round(SPLIT_FRACTIONS[1] * len(idx))))
            test.extend(idx[:n_test])
            valid.extend(idx[n_test:n_test + n_valid])
            train.extend(idx[n_test + n_valid:])
        specs.append(SplitSpec(tuple(sorted(map(int, train))), tuple(sorted(map(int, valid))),
                               tuple(sorted(map(int, test))), seed))
    return specs


# ---------------------------------------------------------------------------
# report

@dataclass
class QualityRow:
    split: str
    count: int
    metric: str
    avg_prior: float
    std_prior: float
    avg_after: float
    std_after: float
    excluded_prior: int = 0
    excluded_after: int = 0


@dataclass
class AurocRow:
    split: int
    repeat: int
    auroc_dicom: float
    auroc_photo: float
    auroc_restored: float


@dataclass
class EvalReport:
    quality_table: list[QualityRow] = field(default_factory=list)
    auroc_table: list[AurocRow] = field(default_factory=list)

    @property
    def summary(self) -> dict:
        out = {}
        for key in ("auroc_dicom", "auroc_photo", "auroc_restored"):
            vals = [getattr(r, key) for r in self.auroc_table]
            out[f"mean_{key}"] = float(np.mean(vals)) if vals else None
        return out

    def to_dict(self) -> dict:
        return {
            "quality_table": [asdict(r) for r in self.quality_table],
            "auroc_table": [asdict(r) for r in self.auroc_table],
            "summary": self.summary,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls([QualityRow(**r) for r in d.get("quality_table", [])],
                   [AurocRow(**r) for r in d.get("auroc_table", [])])


def _finite_stats(values) -> tuple[float, float, int]:
    """Mean and population std of the finite entries, plus the excluded count."""
    values = np.asarray(values, dtype=np.float64)
    finite = values[np.isfinite(values)]
    excluded = len(values) - len(finite)
    if len(finite) == 0:
        return math.inf, 0.0, excluded
    return float(finite.mean()), float(finite.std()), excluded


def quality_table(pairs, model: dncnn.DnCnnModel, split: str) -> list[QualityRow]:
    """Before/after PSNR and mean-SSIM statistics for one split.

    ``prior`` compares clean with the rectified photo, ``after`` with its
    restoration.  Infinite PSNRs (identical images) are left out of the
    averages and counted in ``excluded_prior`` / ``excluded_after``.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no pairs to evaluate")
    rects = [p.rectified() if p.photo.shape != p.clean.shape else p for p in pairs]
    return _quality_rows(split, [r.clean for r in rects], [r.photo for r in rects],
                         [dncnn.restore(model, r.photo) for r in rects])


def _quality_rows(split: str, cleans, priors, afters) -> list[QualityRow]:
    psnr_prior = [psnr(c, p) for c, p in zip(cleans, priors)]
    psnr_after = [psnr(c, a) for c, a in zip(cleans, afters)]
    ssim_prior = [mean_ssim(c, p) for c, p in zip(cleans, priors)]
    ssim_after = [mean_ssim(c, a) for c, a in zip(cleans, afters)]
    rows = []
    for metric, prior, after in (("PSNR", psnr_prior, psnr_after), ("SSIM", ssim_prior, ssim_after)):
        ap, sp, ep = _finite_stats(prior)
        aa, sa, ea = _finite_stats(after)
        rows.append(QualityRow(split, len(cleans), metric, ap, sp, aa, sa, ep, ea))
    return rows


# ---------------------------------------------------------------------------
# end-to-end AUROC experiment

def _degraded_views(dataset: clf.LabeledDataset, degrade_cfg: DegradationConfig,
                    restorer: dncnn.DnCnnModel) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Rectified photo and its restoration for every image (seed = cfg.seed + index)."""
    photos, restored = [], []
    for i, img in enumerate(dataset.images):
        rect = degrade(img, replace(degrade_cfg, seed=degrade_cfg.seed + i)).rectified().photo
        photos.append(rect)
        restored.append(dncnn.restore(restorer, rect))
    return photos, restored


def _run_cell(args) -> AurocRow:
    (dataset, photos, restored, spec, k, repeat, base_seed, train_cfg, aug, widths) = args
    seed = base_seed + k * 1000 + repeat
    model = clf.train_classifier(
        dataset.subset(spec.train_idx), dataset.subset(spec.valid_idx),
        replace(train_cfg, seed=seed), replace(aug, seed=seed), widths)
    test = list(spec.test_idx)
    labels = dataset.labels[test]
    scores = [clf.predict_scores(model, [views[i] for i in test])
              for views in (dataset.images, photos, restored)]
    row = AurocRow(k, repeat, *(auroc(s, labels) for s in scores))
    log.info("split %d repeat %d: %s", k, repeat, row)
    return row


def run_end_to_end(dataset: clf.LabeledDataset, plan: CvPlan, degrade_cfg: DegradationConfig,
                   restorer: dncnn.DnCnnModel, train_cfg: dncnn.TrainConfig,
                   aug: clf.AugmentConfig = clf.AugmentConfig(), widths=(8, 16, 32),
                   jobs: int = 1, progress=None) -> EvalReport:
    """Cross-validated AUROC on clean, photographed and restored test images.

    Classifiers are trained on clean images only.  The quality table of the
    report (split ``"eval"``) scores every degraded and restored view.  Cell ``(k, r)`` uses
    seed ``base_seed + 1000 k + r``, so results do not depend on ``jobs``.
    """
    overlap = set(dataset.sources) & set(restorer.provenance)
    if overlap:
        raise ProvenanceError(
            f"restorer was trained on {len(overlap)} evaluation images, e.g. {sorted(overlap)[0]!r}")
    specs = make_cv_splits(len(dataset), plan, dataset.labels)
    photos, restored = _degraded_views(dataset, degrade_cfg, restorer)
    cells = [(dataset, photos, restored, spec, k, r, plan.base_seed, train_cfg, aug, widths)
             for k, spec in enumerate(specs) for r in range(plan.repeats_per_split)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            rows = list(pool.map(_run_cell, cells))
    else:
        rows = []
        for cell in cells:
            rows.append(_run_cell(cell))
            if progress is not None:
                progress(rows[-1])
    return EvalReport(_quality_rows("eval", dataset.images, photos, restored), rows)


# ---------------------------------------------------------------------------
# files

def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _csv_text(header, rows, comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def emit_report(report: EvalReport, directory) -> dict[str, Path]:
    """Write report.json, quality_table.csv and auroc_table.csv."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": directory / "report.json",
        "quality": directory / "quality_table.csv",
        "auroc": directory / "auroc_table.csv",
    }
    paths["report"].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    excluded = "; ".join(
        f"{r.split}/{r.metric}: {r.excluded_prior} prior, {r.excluded_after} after"
        for r in report.quality_table if r.excluded_prior or r.excluded_after)
    note = "std uses the population (n) divisor; infinite PSNR values are excluded from avg/std"
    if excluded:
        note += f" (excluded: {excluded})"
    paths["quality"].write_text(_csv_text(
        QUALITY_COLUMNS,
        ([getattr(r, c) for c in QUALITY_COLUMNS] for r in report.quality_table), note))
    paths["auroc"].write_text(_csv_text(
        AUROC_COLUMNS, ([getattr(r, c) for c in AUROC_COLUMNS] for r in report.auroc_table)))
    return paths


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))
