"""Residual denoising CNN (DnCNN family): model, training and checkpoints.

The network predicts the residual ``photo - clean``; restoration subtracts
it from the input.  Layer recipe: conv+ReLU, then ``depth - 2`` blocks of
conv+batchnorm+ReLU, then a plain conv back to one channel.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import nn
from .core_image import check_image

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DNCN"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 20
    batch_size: int = 16
    patch_size: int = 48
    patch_stride: int = 16
    flip_augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.patch_size < 1 or self.patch_stride < 1:
            raise ValueError("batch_size, patch_size and patch_stride must be >= 1, epochs >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**_strict(cls, d))

    def to_dict(self) -> dict:
        return asdict(self)


def _strict(cls, d: dict) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return dict(d)


@dataclass
class DnCnnModel:
    layers: list[nn.ConvLayer]
    provenance: tuple[str, ...] = field(default=())

    @classmethod
    def init(cls, depth: int = 8, width: int = 48, seed: int = 0, dtype=np.float32) -> "DnCnnModel":
        if depth < 2 or width < 1:
            raise ValueError("depth must be >= 2 and width >= 1")
        rng = np.random.default_rng(seed)
        layers = [nn.ConvLayer.init(1, width, rng, relu=True, dtype=dtype)]
        for _ in range(depth - 2):
            layers.append(nn.ConvLayer.init(width, width, rng, relu=True, batchnorm=True, dtype=dtype))
        layers.append(nn.ConvLayer.init(width, 1, rng, relu=False, dtype=dtype))
        return cls(layers)

    @classmethod
    def zeros(cls, depth: int = 8, width: int = 48) -> "DnCnnModel":
        model = cls.init(depth, width)
        for layer in model.layers:
            layer.weight[...] = 0
            layer.bias[...] = 0
        return model

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def width(self) -> int:
        return self.layers[0].out_ch

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def state_arrays(self) -> list[np.ndarray]:
        """Parameters and batchnorm buffers in checkpoint order."""
        return [a for layer in self.layers for a in layer.params() + layer.buffers()]

    def astype(self, dtype) -> "DnCnnModel":
        return DnCnnModel([layer.astype(dtype) for layer in self.layers], self.provenance)

    def copy(self) -> "DnCnnModel":
        return self.astype(self.dtype)


def parameter_count(depth: int, width: int) -> int:
    """Number of float32 values stored in a checkpoint."""
    first = 9 * width + width
    middle = 9 * width * width + width + 4 * width
    last = 9 * width + 1
    return first + (depth - 2) * middle + last


def _to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _forward_nhwc(model: DnCnnModel, x: np.ndarray, training: bool):
    caches, stats = [], []
    for layer in model.layers:
        x, cache, st = nn.layer_forward(layer, x, training)
        caches.append(cache)
        stats.append(st)
    return x, caches, stats


def forward(model: DnCnnModel, x: np.ndarray, training: bool = False) -> np.ndarray:
    """Predicted residual for a ``(batch, 1, H, W)`` tensor."""
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != model.layers[0].in_ch:
        raise ValueError(f"expected (B, {model.layers[0].in_ch}, H, W) input, got {x.shape}")
    out, _, _ = _forward_nhwc(model, _to_nhwc(x.astype(model.dtype, copy=False)), training)
    return out.transpose(0, 3, 1, 2)


def _tile_starts(n: int, tile: int, step: int) -> list[int]:
    starts = list(range(0, max(n - tile, 0) + 1, step))
    if starts[-1] + tile < n:
        starts.append(n - tile)
    return starts


def restore(model: DnCnnModel, img: np.ndarray, tile: int = 128) -> np.ndarray:
    """``clamp(img - residual)``; images larger than ``tile`` are processed in
    overlapping tiles (overlap ``tile // 4``) whose seams are averaged."""
    img = check_image(img)
    if img.ndim != 2:
        raise ValueError("restore expects a single-channel image")
    h, w = img.shape
    if h <= tile and w <= tile:
        residual = forward(model, img[None, None], training=False)[0, 0]
    else:
        step = max(tile - tile // 4, 1)
        acc = np.zeros((h, w))
        hits = np.zeros((h, w))
        for y in _tile_starts(h, min(tile, h), step):
            for x in _tile_starts(w, min(tile, w), step):
                patch = img[y:y + tile, x:x + tile]
                acc[y:y + tile, x:x + tile] += forward(model, patch[None, None])[0, 0]
                hits[y:y + tile, x:x + tile] += 1
        residual = acc / hits
    return np.clip(img - residual.astype(np.float64), 0.0, 1.0)


def loss_and_gradients(model: DnCnnModel, photo_batch: np.ndarray, clean_batch: np.ndarray,
                       training: bool = True):
    """MSE between ``photo - residual`` and ``clean``, with gradients for every
    entry of ``model.params()`` (same order).  Also returns batchnorm batch
    statistics so the caller can update running buffers."""
    photo_batch = np.asarray(photo_batch, dtype=model.dtype)
    clean_batch = np.asarray(clean_batch, dtype=model.dtype)
    if photo_batch.shape != clean_batch.shape:
        raise ValueError(f"shape mismatch {photo_batch.shape} vs {clean_batch.shape}")
    x = _to_nhwc(photo_batch)
    target = _to_nhwc(clean_batch)
    residual, caches, stats = _forward_nhwc(model, x, training)
    diff = x - residual - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    dy = (-2.0 / diff.size) * diff
    grads: list[list[np.ndarray]] = []
    for i in range(len(model.layers) - 1, -1, -1):
        dy, g = nn.layer_backward(model.layers[i], dy, caches[i], need_dx=i > 0)
        grads.append(g)
    flat = [g.astype(model.dtype, copy=False) for layer_grads in reversed(grads) for g in layer_grads]
    return loss, flat, stats


def adam_step(model: DnCnnModel, grads: list[np.ndarray], state: nn.AdamState | None,
              cfg: TrainConfig, t: int) -> tuple[DnCnnModel, nn.AdamState]:
    """One in-place Adam update; returns the model and its optimizer state."""
    params = model.params()
    if state is None:
        state = nn.AdamState.zeros_like(params)
    nn.adam_update(params, grads, state, t, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    return model, state


def _patch_stack(images, size: int, stride: int) -> np.ndarray:
    h, w = images[0].shape
    if size > min(h, w):
        raise ValueError(f"patch_size {size} exceeds image size {w}x{h}")
    out = []
    for img in images:
        view = np.lib.stride_tricks.sliding_window_view(img, (size, size))[::stride, ::stride]
        out.append(view.reshape(-1, size, size))
    return np.concatenate(out)


def _dihedral(batch: np.ndarray, code: int) -> np.ndarray:
    if code & 4:
        batch = batch[..., ::-1]
    return np.rot90(batch, k=code & 3, axes=(-2, -1))


def train(pairs, cfg: TrainConfig = TrainConfig(), depth: int = 8, width: int = 48,
          model: DnCnnModel | None = None, progress=None) -> tuple[DnCnnModel, list[float]]:
    """Patch-based minibatch Adam training on rectified ``(photo, clean)`` pairs.

    ``pairs`` holds objects with ``photo``/``clean`` attributes of equal shape.
    Returns the trained model and the mean training loss of each epoch.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("training set is empty")
    photos, cleans = [], []
    for p in pairs:
        if p.photo.shape != p.clean.shape:
            raise ValueError("pairs must be rectified to the clean image dimensions")
        photos.append(p.photo)
        cleans.append(p.clean)
    dtype = np.float32
    x_all = _patch_stack(photos, cfg.patch_size, cfg.patch_stride).astype(dtype)
    y_all = _patch_stack(cleans, cfg.patch_size, cfg.patch_stride).astype(dtype)
    if model is None:
        model = DnCnnModel.init(depth, width, seed=cfg.seed)
    sources = sorted({getattr(p, "source", "") for p in pairs} - {""})
    model.provenance = tuple(sorted(set(model.provenance) | set(sources)))
    rng = np.random.default_rng(cfg.seed + 1)
    state = None
    t = 0
    history = []
    n = len(x_all)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            if cfg.flip_augment:
                code = int(rng.integers(8))
                xb, yb = _dihedral(xb, code), _dihedral(yb, code)
            xb = np.ascontiguousarray(xb[:, None])
            yb = np.ascontiguousarray(yb[:, None])
            loss, grads, stats = loss_and_gradients(model, xb, yb)
            nn.check_finite(loss, f"training loss (epoch {epoch})")
            t += 1
            model, state = adam_step(model, grads, state, cfg, t)
            for layer, st in zip(model.layers, stats):
                if st is not None:
                    nn.update_running_stats(layer, st)
            total += loss * len(idx)
        history.append(total / n)
        log.info("epoch %d: loss %.6g", epoch + 1, history[-1])
        if progress is not None:
            progress(epoch, history[-1])
    return model, history


def save_checkpoint(model: DnCnnModel, path, magic: bytes = CHECKPOINT_MAGIC) -> None:
    arrays = model.state_arrays()
    header = _HEADER.pack(magic, CHECKPOINT_VERSION, model.depth, model.width)
    body = b"".join(np.asarray(a, dtype="<f4").tobytes() for a in arrays)
    Path(path).write_bytes(header + body)


def load_checkpoint(path) -> DnCnnModel:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, depth, width = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if depth < 2 or width < 1 or depth > 4096 or width > 65536:
        raise CheckpointError(f"{path}: corrupt header (depth={depth}, width={width})")
    count = parameter_count(depth, width)
    if len(data) != _HEADER.size + 4 * count:
        raise CheckpointError(f"{path}: expected {count} parameters, file size {len(data)}")
    values = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(np.float32)
    model = DnCnnModel.init(depth, width)
    pos = 0
    for arr in model.state_arrays():
        arr[...] = values[pos:pos + arr.size].reshape(arr.shape)
        pos += arr.size
    return model


def save_train_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
