"""Screen-photograph simulator producing (clean, photo) pairs.

Defects are applied in a fixed order: tone curve, ambient gradient, glare,
moire, blur, sensor noise, keystone warp onto a larger canvas, clamp.  All
randomness comes from one PCG64 generator (``numpy.random.default_rng``)
seeded by ``DegradationConfig.seed``.  Every random quantity is drawn on
every call, whatever the amplitudes, so changing one knob never reshuffles
the draws behind the others.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .core_image import check_image, load_image, to_grayscale
from .geometry import CornerQuad, homography_from_corners, rectify, warp_image
from .metrics import psnr

MAX_GLARE = 8


@dataclass(frozen=True)
class DegradationConfig:
    keystone_strength: float = 0.0
    gamma: float = 1.0
    gain: float = 1.0
    offset: float = 0.0
    ambient_gradient_amp: float = 0.0
    glare_count: int = 0
    glare_radius: float = 6.0
    glare_intensity: float = 0.0
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    moire_amp: float = 0.0
    moire_period: float = 4.0
    seed: int = 0

    def __post_init__(self):
        for name in ("keystone_strength", "ambient_gradient_amp", "glare_radius", "glare_intensity",
                     "blur_sigma", "noise_sigma", "moire_amp"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 <= self.glare_count <= MAX_GLARE:
            raise ValueError(f"glare_count must lie in [0, {MAX_GLARE}]")
        if self.gamma <= 0 or self.moire_period <= 0:
            raise ValueError("gamma and moire_period must be positive")
        if self.keystone_strength >= 0.5:
            raise ValueError("keystone_strength must be < 0.5")

    @classmethod
    def identity(cls, seed: int = 0) -> "DegradationConfig":
        return cls(seed=seed)

    @classmethod
    def screen_photo(cls, seed: int = 0, noise_sigma: float = 0.05) -> "DegradationConfig":
        """Default base for calibration: washed-out display tone (lifted blacks,
        compressed contrast), a faint lighting ramp, one glare spot, weak
        moire, slight blur and mild keystone."""
        return cls(keystone_strength=0.08, gamma=0.9, gain=0.75, offset=0.251,
                   ambient_gradient_amp=0.06, glare_count=1, glare_radius=5.0,
                   glare_intensity=0.15, blur_sigma=0.3, noise_sigma=noise_sigma,
                   moire_amp=0.02, moire_period=4.0, seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown DegradationConfig keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DegradationConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class DegradedPair:
    clean: np.ndarray
    photo: np.ndarray
    true_corners: CornerQuad
    config_used: DegradationConfig
    source: str = field(default="")

    def rectified(self) -> "DegradedPair":
        """The pair with ``photo`` mapped back onto the clean image grid."""
        h, w = self.clean.shape
        photo = rectify(self.photo, self.true_corners, w, h)
        return DegradedPair(self.clean, photo, CornerQuad.rectangle(w, h), self.config_used, self.source)


def _margin(cfg: DegradationConfig, w: int, h: int) -> int:
    return int(math.ceil(cfg.keystone_strength * max(w, h))) + 2


def degrade(img: np.ndarray, cfg: DegradationConfig, source: str = "") -> DegradedPair:
    """Simulate photographing ``img`` off a display."""
    img = check_image(img)
    if img.ndim != 2:
        raise ValueError("degrade expects a single-channel image")
    h, w = img.shape
    rng = np.random.default_rng(cfg.seed)

    # all draws up front, fixed order
    insets = rng.uniform(0.0, 1.0, size=(4, 2))
    grad_angle = rng.uniform(0.0, 2 * np.pi)
    glare_xy = rng.uniform(0.0, 1.0, size=(MAX_GLARE, 2))
    moire_angle = rng.uniform(0.0, np.pi)
    moire_phase = rng.uniform(0.0, 2 * np.pi)
    noise = rng.standard_normal((h, w))

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = cfg.gain * img ** cfg.gamma + cfg.offset

    if cfg.ambient_gradient_amp > 0:
        proj = xx * np.cos(grad_angle) + yy * np.sin(grad_angle)
        span = np.ptp(proj)
        ramp = (proj - proj.min()) / span if span > 0 else np.zeros_like(proj)
        out = out + cfg.ambient_gradient_amp * ramp

    if cfg.glare_intensity > 0:
        for gx, gy in glare_xy[:cfg.glare_count]:
            r2 = (xx - gx * (w - 1)) ** 2 + (yy - gy * (h - 1)) ** 2
            out = out + cfg.glare_intensity * np.exp(-r2 / (2 * cfg.glare_radius ** 2))

    if cfg.moire_amp > 0:
        u = xx * np.cos(moire_angle) + yy * np.sin(moire_angle)
        out = out + cfg.moire_amp * np.sin(2 * np.pi * u / cfg.moire_period + moire_phase)

    if cfg.blur_sigma > 0:
        out = gaussian_filter(out, cfg.blur_sigma, mode="nearest")

    out = out + cfg.noise_sigma * noise

    # keystone: screen rectangle lands on a randomly inset quad of a larger canvas
    m = _margin(cfg, w, h)
    k = cfg.keystone_strength
    d = insets * np.array([k * (w - 1), k * (h - 1)])
    x0, y0, x1, y1 = m, m, m + w - 1, m + h - 1
    corners = CornerQuad(
        (x0 + d[0, 0], y0 + d[0, 1]),
        (x1 - d[1, 0], y0 + d[1, 1]),
        (x1 - d[2, 0], y1 - d[2, 1]),
        (x0 + d[3, 0], y1 - d[3, 1]),
    )
    hom = homography_from_corners(CornerQuad.rectangle(w, h), corners)
    photo = warp_image(out, hom, w + 2 * m, h + 2 * m)
    return DegradedPair(img, np.clip(photo, 0.0, 1.0), corners, cfg, source)


def prior_psnr(pair: DegradedPair) -> float:
    return psnr(pair.clean, pair.rectified().photo)


def corpus_mean_psnr(corpus, cfg: DegradationConfig) -> float:
    """Mean PSNR(clean, rectified photo), image ``i`` degraded with seed ``cfg.seed + i``."""
    values = [prior_psnr(degrade(img, replace(cfg, seed=cfg.seed + i))) for i, img in enumerate(corpus)]
    return float(np.mean(values))


class CalibrationError(ValueError):
    pass


def calibrate_severity(corpus, target_psnr_db: float, base_cfg: DegradationConfig,
                       tol_db: float = 0.05, max_steps: int = 30, sigma_max: float = 0.5) -> DegradationConfig:
    """Bisect ``noise_sigma`` in ``[0, sigma_max]`` until the corpus mean prior
    PSNR is within ``tol_db`` of the target (at most ``max_steps`` halvings).

    A target within ``tol_db`` of an end of the reachable range counts as
    reached at that end.  Raises :class:`CalibrationError` if the target is
    outside the reachable range or the final miss exceeds 0.5 dB.
    """
    corpus = [check_image(c) for c in corpus]
    if not corpus:
        raise CalibrationError("calibration corpus is empty")

    def mean_psnr(sigma):
        return corpus_mean_psnr(corpus, replace(base_cfg, noise_sigma=sigma))

    lo, hi = 0.0, sigma_max
    p_lo, p_hi = mean_psnr(lo), mean_psnr(hi)
    if not p_hi - tol_db <= target_psnr_db <= p_lo + tol_db:
        raise CalibrationError(
            f"target {target_psnr_db} dB unreachable: noise_sigma in [0, {sigma_max}] "
            f"spans {p_hi:.3f} .. {p_lo:.3f} dB")
    best_sigma, best_p = (lo, p_lo) if abs(p_lo - target_psnr_db) < abs(p_hi - target_psnr_db) else (hi, p_hi)
    for _ in range(max_steps):
        if abs(best_p - target_psnr_db) <= tol_db:
            break
        mid = 0.5 * (lo + hi)
        p = mean_psnr(mid)
        if abs(p - target_psnr_db) < abs(best_p - target_psnr_db):
            best_sigma, best_p = mid, p
        if p > target_psnr_db:
            lo = mid
        else:
            hi = mid
    if abs(best_p - target_psnr_db) > 0.5:
        raise CalibrationError(f"bisection ended {best_p - target_psnr_db:+.3f} dB from target")
    return replace(base_cfg, noise_sigma=best_sigma)


IMAGE_SUFFIXES = (".png", ".pgm")


def list_sources(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"source directory not found: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def generate_paired_corpus(sources, cfg: DegradationConfig, n: int, names=None) -> list[DegradedPair]:
    """``n`` pairs from a directory (or list) of images, cycling through them.

    Pair ``i`` uses seed ``cfg.seed + i``, so results do not depend on the
    order in which pairs are produced.  ``names`` tags in-memory sources for
    provenance tracking; file sources are tagged with their path.
    """
    if n == 0:
        return []
    if isinstance(sources, (str, Path)):
        paths = list_sources(sources)
        if not paths:
            raise ValueError(f"no loadable images in {sources}")
        images = [to_grayscale(load_image(p)) for p in paths]
        names = [str(p) for p in paths]
    else:
        images = [check_image(s) for s in sources]
        names = list(names) if names is not None else [f"image:{i}" for i in range(len(images))]
        if not images:
            raise ValueError("no source images")
    return [
        degrade(images[i % len(images)], replace(cfg, seed=cfg.seed + i), source=names[i % len(images)])
        for i in range(n)
    ]
