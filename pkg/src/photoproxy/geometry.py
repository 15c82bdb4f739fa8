"""Four-point homographies and inverse-warp rectification.

A :class:`Homography` maps *source* coordinates to *destination*
coordinates.  Pixel centers are at integer coordinates, so the corners of a
``W`` x ``H`` image are ``(0, 0)``, ``(W-1, 0)``, ``(W-1, H-1)`` and
``(0, H-1)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .core_image import check_image, sample_bilinear


class GeometryError(ValueError):
    pass


class PixelPoint(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class CornerQuad:
    """ROI corners ordered clockwise from top-left (image y axis points down)."""

    tl: PixelPoint
    tr: PixelPoint
    br: PixelPoint
    bl: PixelPoint

    def __post_init__(self):
        for name in ("tl", "tr", "br", "bl"):
            p = PixelPoint(*map(float, getattr(self, name)))
            if not (np.isfinite(p.x) and np.isfinite(p.y)):
                raise GeometryError(f"corner {name} is not finite: {p}")
            object.__setattr__(self, name, p)
        validate_quad(self)

    @classmethod
    def from_points(cls, pts) -> "CornerQuad":
        pts = [tuple(p) for p in pts]
        if len(pts) != 4 or any(len(p) != 2 for p in pts):
            raise GeometryError(f"expected four [x, y] pairs, got {pts!r}")
        return cls(*(PixelPoint(*p) for p in pts))

    @classmethod
    def rectangle(cls, width: int, height: int, x0: float = 0.0, y0: float = 0.0) -> "CornerQuad":
        """Pixel-center corners of a ``width`` x ``height`` grid at ``(x0, y0)``."""
        x1 = x0 + width - 1
        y1 = y0 + height - 1
        return cls((x0, y0), (x1, y0), (x1, y1), (x0, y1))

    def points(self) -> np.ndarray:
        return np.array([self.tl, self.tr, self.br, self.bl], dtype=np.float64)

    def to_list(self) -> list[list[float]]:
        return self.points().tolist()


def validate_quad(q: CornerQuad) -> None:
    """Reject quads that are not strictly convex and clockwise from top-left."""
    pts = np.array([q.tl, q.tr, q.br, q.bl], dtype=np.float64)
    scale = max(1.0, float(np.ptp(pts)))
    for i in range(4):
        e1 = pts[(i + 1) % 4] - pts[i]
        e2 = pts[(i + 2) % 4] - pts[(i + 1) % 4]
        cross = e1[0] * e2[1] - e1[1] * e2[0]
        if cross <= 1e-9 * scale * scale:
            raise GeometryError(
                f"degenerate or misordered corner quad {pts.tolist()}: "
                "corners must form a strictly convex quadrilateral, clockwise from top-left"
            )


class Homography:
    """3x3 projective map, normalized so ``m[2, 2] == 1`` when nonzero."""

    def __init__(self, m):
        m = np.array(m, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise GeometryError("homography has non-finite coefficients")
        if abs(m[2, 2]) > 1e-12:
            m = m / m[2, 2]
        if np.linalg.cond(m) > 1e12:
            raise GeometryError("homography matrix is singular or ill-conditioned")
        self.m = m

    def __repr__(self):
        return f"Homography({self.m.tolist()!r})"

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls([[1, 0, tx], [0, 1, ty], [0, 0, 1]])

    def map_arrays(self, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        m = self.m
        w = m[2, 0] * xs + m[2, 1] * ys + m[2, 2]
        if np.any(np.abs(w) < 1e-12):
            raise GeometryError("point maps to infinity")
        return (m[0, 0] * xs + m[0, 1] * ys + m[0, 2]) / w, (m[1, 0] * xs + m[1, 1] * ys + m[1, 2]) / w

    def compose(self, other: "Homography") -> "Homography":
        """``self`` after ``other``."""
        return Homography(self.m @ other.m)


def _normalizer(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def homography_from_corners(src: CornerQuad, dst: CornerQuad) -> Homography:
    """Exact 4-point direct linear solve (8 unknowns, ``h33 = 1``).

    Points are centered and scaled before solving and the result is mapped
    back, which keeps the 8x8 system well conditioned for large coordinates.
    """
    p = src.points()
    q = dst.points()
    tp = _normalizer(p)
    tq = _normalizer(q)
    pn = (tp @ np.c_[p, np.ones(4)].T).T[:, :2]
    qn = (tq @ np.c_[q, np.ones(4)].T).T[:, :2]
    a = np.zeros((8, 8))
    rhs = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(pn, qn)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        rhs[2 * i] = u
        rhs[2 * i + 1] = v
    try:
        if np.linalg.cond(a) > 1e12:
            raise np.linalg.LinAlgError
        h = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError:
        raise GeometryError(
            f"singular correspondence system for src={p.tolist()} dst={q.tolist()}"
        ) from None
    hn = np.append(h, 1.0).reshape(3, 3)
    return Homography(np.linalg.inv(tq) @ hn @ tp)


def apply(h: Homography, p) -> PixelPoint:
    x, y = h.map_arrays(np.float64(p[0]), np.float64(p[1]))
    return PixelPoint(float(x), float(y))


def invert(h: Homography) -> Homography:
    try:
        return Homography(np.linalg.inv(h.m))
    except np.linalg.LinAlgError:
        raise GeometryError("homography is not invertible") from None


def warp_image(img: np.ndarray, h: Homography, out_w: int, out_h: int) -> np.ndarray:
    """Inverse-mapped bilinear warp; ``h`` maps source to output coordinates."""
    img = check_image(img)
    hinv = invert(h)
    gx, gy = np.meshgrid(np.arange(out_w, dtype=np.float64), np.arange(out_h, dtype=np.float64))
    sx, sy = hinv.map_arrays(gx, gy)
    return sample_bilinear(img, sx, sy)


def rectify(photo: np.ndarray, corners: CornerQuad, out_w: int, out_h: int) -> np.ndarray:
    """Resample the quad ``corners`` of ``photo`` onto an ``out_w`` x ``out_h`` grid."""
    photo = check_image(photo)
    h, w = photo.shape[:2]
    pts = corners.points()
    tol = 1e-6
    if pts[:, 0].min() < -tol or pts[:, 1].min() < -tol or pts[:, 0].max() > w - 1 + tol or pts[:, 1].max() > h - 1 + tol:
        raise GeometryError(f"corners {pts.tolist()} fall outside the {w}x{h} photo")
    hom = homography_from_corners(corners, CornerQuad.rectangle(out_w, out_h))
    return warp_image(photo, hom, out_w, out_h)


def load_corners(path) -> CornerQuad:
    """Read a JSON array of four ``[x, y]`` pairs in tl, tr, br, bl order."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GeometryError(f"{path}: malformed corner JSON ({exc})") from exc
    if not isinstance(data, list) or len(data) != 4:
        raise GeometryError(f"{path}: expected a list of four [x, y] pairs")
    try:
        return CornerQuad.from_points(data)
    except TypeError as exc:
        raise GeometryError(f"{path}: bad corner entry ({exc})") from exc


def save_corners(quad: CornerQuad, path) -> None:
    Path(path).write_text(json.dumps(quad.to_list()) + "\n")
