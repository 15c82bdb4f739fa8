"""Image carrier conventions, 8-bit file I/O and elementary raster operations.

Images are plain numpy arrays of float64 intensities in [0, 1]: shape
``(H, W)`` for grayscale and ``(H, W, 3)`` for RGB.  Intensity 1.0
corresponds to the 8-bit code 255; that mapping only appears at the file
boundary (:func:`load_image` / :func:`save_image`).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# coordinates closer than this to an integer are sampled exactly
_SNAP = 1e-9


class ImageIOError(OSError):
    """Base class for image file errors."""


class UnsupportedFormatError(ImageIOError):
    pass


class CorruptImageError(ImageIOError):
    pass


def check_image(img: np.ndarray) -> np.ndarray:
    """Validate the carrier contract and return ``img`` as float64."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise ValueError(f"expected (H, W) or (H, W, 3) image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must be at least 1x1")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return img


def channels(img: np.ndarray) -> int:
    return 1 if img.ndim == 2 else img.shape[2]


def quantize(img: np.ndarray) -> np.ndarray:
    """Map intensities to uint8 codes, rounding half away from zero."""
    scaled = 255.0 * np.clip(img, 0.0, 1.0)
    return np.floor(scaled + 0.5).astype(np.uint8)


def dequantize(codes: np.ndarray) -> np.ndarray:
    return np.asarray(codes, dtype=np.float64) / 255.0


def load_image(path) -> np.ndarray:
    """Read an 8-bit PNG or binary PGM (P5) file into a [0, 1] array."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image file not found: {path}")
    try:
        with Image.open(path) as im:
            fmt = im.format
            if fmt not in ("PNG", "PPM"):
                raise UnsupportedFormatError(f"{path}: unsupported format {fmt}")
            if fmt == "PPM" and im.mode != "L":
                raise UnsupportedFormatError(f"{path}: only binary PGM (P5) is supported")
            if im.mode in ("1", "P", "LA", "RGBA"):
                im = im.convert("RGB" if im.mode in ("P", "RGBA") else "L")
            if im.mode not in ("L", "RGB"):
                raise UnsupportedFormatError(f"{path}: unsupported pixel mode {im.mode}")
            codes = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise UnsupportedFormatError(f"{path}: not a PNG or PGM image") from exc
    except ImageIOError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise CorruptImageError(f"{path}: corrupt image stream ({exc})") from exc
    return dequantize(codes)


def save_image(img: np.ndarray, path) -> None:
    """Write ``img`` as 8-bit PNG, or PGM when the suffix is ``.pgm``."""
    img = check_image(img)
    path = Path(path)
    codes = quantize(img)
    if path.suffix.lower() == ".pgm":
        if codes.ndim != 2:
            raise ValueError("PGM output requires a grayscale image")
        header = f"P5\n{codes.shape[1]} {codes.shape[0]}\n255\n".encode("ascii")
        path.write_bytes(header + codes.tobytes())
        return
    Image.fromarray(codes).save(path, format="PNG")


def to_grayscale(img: np.ndarray) -> np.ndarray:
    img = check_image(img)
    if img.ndim == 2:
        return img
    r, g, b = LUMA_WEIGHTS
    gray = r * img[:, :, 0] + g * img[:, :, 1] + b * img[:, :, 2]
    return np.clip(gray, 0.0, 1.0)


def _snap(c: np.ndarray) -> np.ndarray:
    r = np.round(c)
    return np.where(np.abs(c - r) < _SNAP, r, c)


def sample_bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear lookup of a 2-D image at fractional (x, y) with edge clamping.

    Pixel centers sit at integer coordinates.  Coordinates within 1e-9 of an
    integer are snapped so exact-grid sampling reproduces pixels bit for bit.
    """
    h, w = img.shape[:2]
    xs = np.clip(_snap(np.asarray(xs, dtype=np.float64)), 0.0, w - 1)
    ys = np.clip(_snap(np.asarray(ys, dtype=np.float64)), 0.0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def _axis_coords(src_len: int, dst_len: int) -> np.ndarray:
    if dst_len == 1:
        return np.array([(src_len - 1) / 2.0])
    return np.arange(dst_len) * ((src_len - 1) / (dst_len - 1))


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Align-corners bilinear resize; a length-1 target samples the center."""
    img = check_image(img)
    if out_w < 1 or out_h < 1:
        raise ValueError("output dimensions must be >= 1")
    h, w = img.shape[:2]
    if (out_w, out_h) == (w, h):
        return img.copy()
    xs = _axis_coords(w, out_w)
    ys = _axis_coords(h, out_h)
    gx, gy = np.meshgrid(xs, ys)
    return sample_bilinear(img, gx, gy)


def extract_patches(img: np.ndarray, size: int, stride: int) -> list[np.ndarray]:
    """All fully contained ``size`` x ``size`` patches in raster order."""
    img = check_image(img)
    h, w = img.shape[:2]
    if size > min(h, w):
        raise ValueError(f"patch size {size} exceeds image {w}x{h}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return [
        img[y:y + size, x:x + size].copy()
        for y in range(0, h - size + 1, stride)
        for x in range(0, w - size + 1, stride)
    ]
