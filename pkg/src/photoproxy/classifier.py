"""Compact CNN lesion classifier, synthetic lesion task and augmentation.

The classifier is a small stand-in for a large ImageNet backbone: three
conv+ReLU+maxpool stages, global average pooling and one logit.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import nn
from .core_image import check_image, sample_bilinear
from .dncnn import CheckpointError, TrainConfig
from .roc import auroc

log = logging.getLogger(__name__)

CLASSIFIER_MAGIC = b"CCLF"
CLASSIFIER_VERSION = 1
_HEADER = struct.Struct("<4sIII")
BENIGN, MALIGNANT = 0, 1
SPECKLE = 0.15
SPECKLE_GRAIN = 1.0


# ---------------------------------------------------------------------------
# synthetic lesion task

@dataclass
class LabeledDataset:
    images: list[np.ndarray]
    labels: np.ndarray
    provenance: str = ""
    item_sources: list[str] | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self):
        return len(self.images)

    @property
    def class_ratio(self) -> float:
        """Fraction of benign cases."""
        return float(np.mean(self.labels == BENIGN)) if len(self) else 0.0

    @property
    def sources(self) -> list[str]:
        """Per-image provenance tags."""
        if self.item_sources is not None:
            return list(self.item_sources)
        return [f"{self.provenance}#{i}" for i in range(len(self))]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.intp)
        src = self.sources
        return LabeledDataset([self.images[i] for i in idx], self.labels[idx], self.provenance,
                              [src[i] for i in idx])

    def has_both_classes(self) -> bool:
        return bool(np.any(self.labels == 0) and np.any(self.labels == 1))


def _speckle(rng, size, grain):
    """Unit-mean, unit-std speckle: Rayleigh draws smoothed to ``grain`` pixels."""
    field_ = gaussian_filter(rng.rayleigh(1.0, (size, size)), grain, mode="wrap")
    return 1.0 + (field_ - field_.mean()) / field_.std()


def lesion_image(rng: np.random.Generator, size: int, malignant: bool) -> np.ndarray:
    """One ultrasound-like ROI with a dark lesion.

    Benign lesions are round-ish with smooth margins; malignant ones are
    elongated with lobulated/spiculated margins.  The two shape
    distributions overlap, so the task is not perfectly separable.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    tissue = 0.55 + 0.12 * gaussian_filter(rng.standard_normal((size, size)), size / 8, mode="wrap") * (size / 8)
    background = tissue * (1 + SPECKLE * (_speckle(rng, size, SPECKLE_GRAIN) - 1))

    cx, cy = size / 2 + rng.uniform(-size / 10, size / 10, 2)
    semi_major = size * rng.uniform(0.14, 0.22)
    if malignant:
        ratio = rng.uniform(1.25, 2.2)
        rough = rng.uniform(0.06, 0.22)
    else:
        ratio = rng.uniform(1.0, 1.6)
        rough = rng.uniform(0.0, 0.09)
    semi_minor = semi_major / ratio
    angle = rng.uniform(0, np.pi)
    dx, dy = xx - cx, yy - cy
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    rho = np.hypot(u / semi_major, v / semi_minor)
    theta = np.arctan2(v, u)
    lobes = rng.integers(5, 10)
    phases = rng.uniform(0, 2 * np.pi, 3)
    margin = 1 + rough * (np.cos(lobes * theta + phases[0])
                          + 0.5 * np.cos((2 * lobes + 1) * theta + phases[1])
                          + 0.3 * np.cos(3 * theta + phases[2])) / 1.8
    inside = 1.0 / (1.0 + np.exp(-(margin - rho) * semi_minor / 0.8))
    lesion_level = rng.uniform(0.12, 0.25) * (1 + 0.1 * (_speckle(rng, size, SPECKLE_GRAIN) - 1))
    img = background * (1 - inside) + lesion_level * inside
    return np.clip(img, 0.0, 1.0)


def synth_lesion_dataset(n_benign: int, n_malignant: int, image_size: int = 64, seed: int = 0) -> LabeledDataset:
    """Deterministic labeled proxy set; benign cases first, then malignant."""
    if n_benign < 0 or n_malignant < 0:
        raise ValueError("counts must be >= 0")
    rng = np.random.default_rng(seed)
    labels = [BENIGN] * n_benign + [MALIGNANT] * n_malignant
    images = [lesion_image(rng, image_size, lab == MALIGNANT) for lab in labels]
    return LabeledDataset(images, np.array(labels, dtype=np.int64), f"synth_lesion:size={image_size}:seed={seed}")


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentConfig:
    hflip_prob: float = 0.5
    max_rotation: float = 10.0
    brightness_jitter: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.hflip_prob <= 1:
            raise ValueError("hflip_prob must lie in [0, 1]")
        if self.max_rotation < 0 or self.brightness_jitter < 0:
            raise ValueError("max_rotation and brightness_jitter must be >= 0")

    @classmethod
    def none(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown AugmentConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AugmentDraw:
    flip: bool
    angle: float
    brightness: float


def draw_augment(cfg: AugmentConfig, rng: np.random.Generator) -> AugmentDraw:
    u = rng.uniform(size=3)
    return AugmentDraw(
        flip=bool(u[0] < cfg.hflip_prob),
        angle=(2 * u[1] - 1) * cfg.max_rotation,
        brightness=(2 * u[2] - 1) * cfg.brightness_jitter,
    )


def augment(img: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    """Flip, rotate about the center (bilinear, edge clamp), shift brightness, clamp."""
    img = check_image(img)
    if img.ndim != 2:
        raise ValueError("augment expects a single-channel image")
    out = img[:, ::-1] if draw.flip else img
    if draw.angle != 0:
        h, w = out.shape
        t = np.deg2rad(draw.angle)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        cx, cy = (w - 1) / 2, (h - 1) / 2
        sx = np.cos(t) * (xx - cx) + np.sin(t) * (yy - cy) + cx
        sy = -np.sin(t) * (xx - cx) + np.cos(t) * (yy - cy) + cy
        out = sample_bilinear(out, sx, sy)
    if draw.brightness != 0:
        out = out + draw.brightness
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# model

@dataclass
class CompactClassifier:
    stages: list[nn.ConvLayer]
    fc_weight: np.ndarray
    fc_bias: np.ndarray
    valid_history: list[float] = field(default_factory=list)

    @classmethod
    def init(cls, widths=(8, 16, 32), seed: int = 0, dtype=np.float32) -> "CompactClassifier":
        rng = np.random.default_rng(seed)
        stages = []
        cin = 1
        for cout in widths:
            stages.append(nn.ConvLayer.init(cin, cout, rng, relu=True, dtype=dtype))
            cin = cout
        fc = (rng.standard_normal(cin) * np.sqrt(1.0 / cin)).astype(dtype)
        return cls(stages, fc, np.zeros(1, dtype))

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(s.out_ch for s in self.stages)

    @property
    def dtype(self):
        return self.fc_weight.dtype

    def params(self) -> list[np.ndarray]:
        return [p for s in self.stages for p in s.params()] + [self.fc_weight, self.fc_bias]

    def astype(self, dtype) -> "CompactClassifier":
        return CompactClassifier([s.astype(dtype) for s in self.stages], self.fc_weight.astype(dtype),
                                 self.fc_bias.astype(dtype), list(self.valid_history))

    def copy(self) -> "CompactClassifier":
        return self.astype(self.dtype)


def _batch(images, dtype) -> np.ndarray:
    # centered input; NHWC
    return (np.stack(images).astype(dtype) - 0.5)[..., None]


def _logits(model: CompactClassifier, x: np.ndarray, keep_cache: bool = False):
    caches = []
    for stage in model.stages:
        if min(x.shape[1:3]) < 2:
            raise ValueError("input too small for the number of pooling stages")
        x, conv_cache, _ = nn.layer_forward(stage, x, training=False)
        x, pool_cache = nn.maxpool2x2_forward(x)
        caches.append((conv_cache, pool_cache))
    pooled = x.mean(axis=(1, 2))
    z = pooled @ model.fc_weight + model.fc_bias[0]
    return z, (caches, x.shape, pooled) if keep_cache else None


def loss_and_gradients(model: CompactClassifier, images, labels):
    """Mean logistic loss and gradients ordered as ``model.params()``."""
    x = _batch(images, model.dtype)
    y = np.asarray(labels, dtype=model.dtype)
    z, (caches, feat_shape, pooled) = _logits(model, x, keep_cache=True)
    loss = float(np.mean(np.logaddexp(0.0, z.astype(np.float64)) - y * z))
    dz = (_sigmoid(z) - y) / len(y)
    d_fc_w = pooled.T @ dz
    d_fc_b = np.array([dz.sum()], dtype=model.dtype)
    b, h, w, c = feat_shape
    dx = np.broadcast_to((dz[:, None] * model.fc_weight)[:, None, None, :] / (h * w), feat_shape)
    grads = []
    for i in range(len(model.stages) - 1, -1, -1):
        conv_cache, pool_cache = caches[i]
        dx = nn.maxpool2x2_backward(np.ascontiguousarray(dx), pool_cache)
        dx, g = nn.layer_backward(model.stages[i], dx, conv_cache, need_dx=i > 0)
        grads.append(g)
    flat = [g for stage_grads in reversed(grads) for g in stage_grads] + [d_fc_w, d_fc_b]
    return loss, [g.astype(model.dtype, copy=False) for g in flat]


def _sigmoid(z):
    return np.where(z >= 0, 1 / (1 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z))))


def predict_scores(model: CompactClassifier, images, batch_size: int = 64) -> np.ndarray:
    """Malignancy probability per image, in input order."""
    images = list(images)
    if not images:
        raise ValueError("no images to score")
    out = []
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        z, _ = _logits(model, _batch(chunk, model.dtype))
        out.append(_sigmoid(z.astype(np.float64)))
    return np.concatenate(out)


def train_classifier(train: LabeledDataset, valid: LabeledDataset, cfg: TrainConfig,
                     aug: AugmentConfig = AugmentConfig(), widths=(8, 16, 32)) -> CompactClassifier:
    """Adam on logistic loss; returns the snapshot with the best validation
    AUROC.  The initial weights are the first candidate and a later epoch
    replaces the best only on strict improvement."""
    if len(train) == 0:
        raise ValueError("training split is empty")
    if len(valid) == 0 or not valid.has_both_classes():
        raise ValueError("validation split must contain both classes")
    model = CompactClassifier.init(widths, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, aug.seed])
    best = model.copy()
    best_auc = -np.inf
    state = None
    t = 0
    history = []
    n = len(train)
    for epoch in range(cfg.epochs):
        if epoch == 0:
            init_auc = auroc(predict_scores(model, valid.images), valid.labels)
            best, best_auc = model.copy(), init_auc
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [augment(train.images[i], draw_augment(aug, rng)) for i in idx]
            loss, grads = loss_and_gradients(model, batch, train.labels[idx])
            nn.check_finite(loss, "classifier loss")
            t += 1
            params = model.params()
            if state is None:
                state = nn.AdamState.zeros_like(params)
            nn.adam_update(params, grads, state, t, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
        valid_auc = auroc(predict_scores(model, valid.images), valid.labels)
        history.append(valid_auc)
        log.debug("classifier epoch %d: valid AUROC %.4f", epoch + 1, valid_auc)
        if valid_auc > best_auc:
            best, best_auc = model.copy(), valid_auc
    best.valid_history = history
    return best


def save_classifier(model: CompactClassifier, path) -> None:
    widths = model.widths
    header = _HEADER.pack(CLASSIFIER_MAGIC, CLASSIFIER_VERSION, len(widths), 0)
    body = struct.pack(f"<{len(widths)}I", *widths)
    body += b"".join(np.asarray(p, dtype="<f4").tobytes() for p in model.params())
    Path(path).write_bytes(header + body)


def load_classifier(path) -> CompactClassifier:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, n_stages, _ = _HEADER.unpack_from(data)
    if magic != CLASSIFIER_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {magic!r}")
    if version != CLASSIFIER_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CLASSIFIER_VERSION}")
    if not 1 <= n_stages <= 16 or len(data) < _HEADER.size + 4 * n_stages:
        raise CheckpointError(f"{path}: corrupt header")
    widths = struct.unpack_from(f"<{n_stages}I", data, _HEADER.size)
    model = CompactClassifier.init(widths)
    params = model.params()
    offset = _HEADER.size + 4 * n_stages
    if len(data) != offset + 4 * sum(p.size for p in params):
        raise CheckpointError(f"{path}: parameter block has the wrong size")
    values = np.frombuffer(data, dtype="<f4", offset=offset)
    pos = 0
    for p in params:
        p[...] = values[pos:pos + p.size].reshape(p.shape)
        pos += p.size
    return model
