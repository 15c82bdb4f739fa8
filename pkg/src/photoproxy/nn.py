"""Layer primitives with hand-written backward passes, plus Adam.

Activations are kept channels-last, ``(B, H, W, C)``, so that every
convolution tap is a contiguous matmul.  Convolution kernels are stored
``(out_ch, in_ch, 3, 3)``, the order used by checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class NumericalError(ArithmeticError):
    """Raised when a NaN or infinity shows up in training."""


@dataclass
class ConvLayer:
    """3x3, stride-1, zero-padded convolution with optional batchnorm and ReLU."""

    weight: np.ndarray
    bias: np.ndarray
    has_relu: bool = True
    has_batchnorm: bool = False
    bn_scale: np.ndarray | None = None
    bn_shift: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    @classmethod
    def init(cls, in_ch: int, out_ch: int, rng: np.random.Generator, *, relu=True,
             batchnorm=False, dtype=np.float32) -> "ConvLayer":
        std = np.sqrt(2.0 / (9 * in_ch))
        w = (rng.standard_normal((out_ch, in_ch, 3, 3)) * std).astype(dtype)
        layer = cls(w, np.zeros(out_ch, dtype), relu, batchnorm)
        if batchnorm:
            layer.bn_scale = np.ones(out_ch, dtype)
            layer.bn_shift = np.zeros(out_ch, dtype)
            layer.running_mean = np.zeros(out_ch, dtype)
            layer.running_var = np.ones(out_ch, dtype)
        return layer

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]

    def params(self) -> list[np.ndarray]:
        """Trainable arrays, in checkpoint order."""
        if self.has_batchnorm:
            return [self.weight, self.bias, self.bn_scale, self.bn_shift]
        return [self.weight, self.bias]

    def buffers(self) -> list[np.ndarray]:
        if self.has_batchnorm:
            return [self.running_mean, self.running_var]
        return []

    def astype(self, dtype) -> "ConvLayer":
        conv = lambda a: None if a is None else a.astype(dtype)
        return ConvLayer(conv(self.weight), conv(self.bias), self.has_relu, self.has_batchnorm,
                         conv(self.bn_scale), conv(self.bn_shift), conv(self.running_mean),
                         conv(self.running_var))


def conv3x3_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Zero-padded 3x3 convolution as nine shifted matmuls.

    The padded batch is flattened to rows of ``(B*(H+2)*(W+2), C)``; tap
    ``(dy, dx)`` is then the contiguous row slice starting at
    ``dy*(W+2) + dx``.  Rows that land in the padding ring are discarded.
    """
    b, h, w, cin = x.shape
    hp, wp = h + 2, w + 2
    n = b * hp * wp
    xp = np.zeros((n + 2 * wp + 2, cin), dtype=x.dtype)
    xp[:n].reshape(b, hp, wp, cin)[:, 1:-1, 1:-1] = x
    taps = np.ascontiguousarray(weight.transpose(2, 3, 1, 0))
    y = xp[:n] @ taps[0, 0]
    for dy in range(3):
        for dx in range(3):
            if dy or dx:
                off = dy * wp + dx
                y += xp[off:off + n] @ taps[dy, dx]
    y = y.reshape(b, hp, wp, -1)[:, :h, :w] + bias
    return y, (xp, taps, x.shape)


def conv3x3_backward(dy: np.ndarray, cache, need_dx: bool = True):
    xp, taps, (b, h, w, cin) = cache
    hp, wp = h + 2, w + 2
    n = b * hp * wp
    cout = taps.shape[-1]
    dyp = np.zeros((b, hp, wp, cout), dtype=dy.dtype)
    dyp[:, :h, :w] = dy
    dyp = dyp.reshape(n, cout)
    dtaps = np.empty_like(taps)
    dxp = np.zeros_like(xp) if need_dx else None
    for oy in range(3):
        for ox in range(3):
            off = oy * wp + ox
            dtaps[oy, ox] = xp[off:off + n].T @ dyp
            if need_dx:
                dxp[off:off + n] += dyp @ np.ascontiguousarray(taps[oy, ox].T)
    dw = dtaps.transpose(3, 2, 0, 1)
    db = dy.sum(axis=(0, 1, 2))
    if not need_dx:
        return None, dw, db
    dx = dxp[:n].reshape(b, hp, wp, cin)[:, 1:-1, 1:-1]
    return dx, dw, db


def batchnorm_forward(x, scale, shift, running_mean, running_var, training: bool):
    """Returns ``(y, cache, batch_stats)``; ``batch_stats`` is None in inference."""
    if training:
        axes = (0, 1, 2)
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        stats = (mean, var, x.size // x.shape[-1])
    else:
        mean, var, stats = running_mean, running_var, None
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv_std
    return xhat * scale + shift, (xhat, inv_std, scale, training), stats


def batchnorm_backward(dy, cache):
    xhat, inv_std, scale, training = cache
    dscale = (dy * xhat).sum(axis=(0, 1, 2))
    dshift = dy.sum(axis=(0, 1, 2))
    dxhat = dy * scale
    if not training:
        return dxhat * inv_std, dscale, dshift
    n = dy.size // dy.shape[-1]
    dx = inv_std / n * (n * dxhat - dxhat.sum(axis=(0, 1, 2)) - xhat * (dxhat * xhat).sum(axis=(0, 1, 2)))
    return dx, dscale, dshift


def update_running_stats(layer: ConvLayer, stats) -> None:
    mean, var, n = stats
    unbiased = var * (n / max(n - 1, 1))
    layer.running_mean[...] = (1 - BN_MOMENTUM) * layer.running_mean + BN_MOMENTUM * mean
    layer.running_var[...] = (1 - BN_MOMENTUM) * layer.running_var + BN_MOMENTUM * unbiased


def layer_forward(layer: ConvLayer, x: np.ndarray, training: bool):
    y, conv_cache = conv3x3_forward(x, layer.weight, layer.bias)
    bn_cache = stats = None
    if layer.has_batchnorm:
        y, bn_cache, stats = batchnorm_forward(
            y, layer.bn_scale, layer.bn_shift, layer.running_mean, layer.running_var, training)
    mask = None
    if layer.has_relu:
        mask = y > 0
        y = y * mask
    return y, (conv_cache, bn_cache, mask), stats


def layer_backward(layer: ConvLayer, dy: np.ndarray, cache, need_dx: bool = True):
    conv_cache, bn_cache, mask = cache
    grads = []
    if mask is not None:
        dy = dy * mask
    if layer.has_batchnorm:
        dy, dscale, dshift = batchnorm_backward(dy, bn_cache)
        grads = [dscale, dshift]
    dx, dw, db = conv3x3_backward(dy, conv_cache, need_dx)
    return dx, [dw, db] + grads


def maxpool2x2_forward(x: np.ndarray):
    b, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    xc = x[:, :2 * h2, :2 * w2, :].reshape(b, h2, 2, w2, 2, c)
    y = xc.max(axis=(2, 4))
    # first maximal element of each window receives the gradient
    flat = xc.transpose(0, 1, 3, 5, 2, 4).reshape(b, h2, w2, c, 4)
    arg = flat.argmax(axis=-1)
    return y, (arg, x.shape)


def maxpool2x2_backward(dy: np.ndarray, cache):
    arg, (b, h, w, c) = cache
    h2, w2 = h // 2, w // 2
    onehot = (arg[..., None] == np.arange(4)).astype(dy.dtype) * dy[..., None]
    win = onehot.reshape(b, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, 2 * h2, 2 * w2, c)
    dx = np.zeros((b, h, w, c), dtype=dy.dtype)
    dx[:, :2 * h2, :2 * w2, :] = win
    return dx


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_update(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, t: int,
                lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam step applied in place; ``t`` counts from 1."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter, gradient and state lists differ in length")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)
    state.t = t


def check_finite(value, what: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite values detected in {what}")


def numerical_gradient(f, param: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``param`` (perturbed in place)."""
    grad = np.zeros_like(param, dtype=np.float64)
    it = np.nditer(param, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = param[idx]
        param[idx] = orig + step
        fp = f()
        param[idx] = orig - step
        fm = f()
        param[idx] = orig
        grad[idx] = (fp - fm) / (2 * step)
    return grad
