"""Binary-mask morphology and coarse-mask synthesis.

Masks are 2-D ``uint8`` numpy arrays holding 0/1. Segmentations are 2-D integer
arrays with class ids in ``[0, NUM_CLASSES)``.
"""
from __future__ import annotations

import numpy as np
from matplotlib.path import Path
from scipy import ndimage

from .errors import MaskError, ParameterError, PreconditionError

NUM_CLASSES = 19

# 19-part face parsing label set, in the conventional order
CLASS_NAMES = (
    "background", "skin", "l_brow", "r_brow", "l_eye", "r_eye", "eye_g",
    "l_ear", "r_ear", "ear_r", "nose", "mouth", "u_lip", "l_lip", "neck",
    "neck_l", "cloth", "hair", "hat",
)


def as_mask(m) -> np.ndarray:
    arr = np.asarray(m)
    if arr.ndim != 2:
        raise MaskError(f"mask must be 2-D, got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise MaskError("mask has values outside {0, 1}")
    return arr.astype(np.uint8)


def attr_mask(seg: np.ndarray, class_id) -> np.ndarray:
    """Binary mask of one class id, or of a union when ``class_id`` is a sequence."""
    ids = [class_id] if np.isscalar(class_id) else list(class_id)
    for c in ids:
        if not 0 <= int(c) < NUM_CLASSES:
            raise ParameterError(f"class_id {c} outside [0, {NUM_CLASSES - 1}]")
    return np.isin(np.asarray(seg), ids).astype(np.uint8)


def _square(r: int) -> np.ndarray:
    return np.ones((2 * r + 1, 2 * r + 1), dtype=bool)


def dilate(m, r: int) -> np.ndarray:
    if r < 0:
        raise ParameterError(f"radius must be >= 0, got {r}")
    m = as_mask(m)
    if r == 0:
        return m.copy()
    return ndimage.binary_dilation(m, structure=_square(r)).astype(np.uint8)


def erode(m, r: int) -> np.ndarray:
    if r < 0:
        raise ParameterError(f"radius must be >= 0, got {r}")
    m = as_mask(m)
    if r == 0:
        return m.copy()
    return ndimage.binary_erosion(m, structure=_square(r), border_value=0).astype(np.uint8)


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def hull_vertices(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise convex hull of 2-D points (monotone chain), collinear points dropped."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=float).tolist())))
    if len(pts) <= 2:
        return np.array(pts, dtype=float)
    lower: list = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=float)


def convex_hull(m) -> np.ndarray:
    """Filled convex hull of the set pixel centres, rasterised by pixel centre."""
    m = as_mask(m)
    pts = np.argwhere(m).astype(float)  # (row, col)
    if len(pts) == 0:
        raise PreconditionError("convex_hull of an empty mask")
    hull = hull_vertices(pts)
    h, w = m.shape
    rr, cc = np.mgrid[0:h, 0:w]
    grid = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(float)
    eps = 1e-9
    if len(hull) == 1:
        inside = np.all(grid == hull[0], axis=1)
    elif len(hull) == 2:
        a, b = hull
        d = b - a
        rel = grid - a
        cross = d[0] * rel[:, 1] - d[1] * rel[:, 0]
        along = rel @ d / (d @ d)
        inside = (np.abs(cross) <= eps) & (along >= -eps) & (along <= 1 + eps)
    else:
        inside = np.ones(len(grid), dtype=bool)
        for k in range(len(hull)):
            a, b = hull[k], hull[(k + 1) % len(hull)]
            d = b - a
            rel = grid - a
            inside &= d[0] * rel[:, 1] - d[1] * rel[:, 0] >= -eps
    out = inside.reshape(h, w).astype(np.uint8)
    return np.maximum(out, m)


def _cubic(p0, c1, c2, p3, n: int = 16) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    return ((1 - t) ** 3) * p0 + 3 * ((1 - t) ** 2) * t * c1 + 3 * (1 - t) * t ** 2 * c2 + t ** 3 * p3


def bezier_bbox_mask(m, rng: np.random.Generator, jitter: float = 1.5,
                     corner_radius: float = 3.0) -> np.ndarray:
    """Smooth rounded blob fitted around the bounding box of ``m``.

    Each side of the box is pushed outward by an independent ``U(0, jitter)``
    offset, and each corner is rounded by a cubic Bezier segment whose two
    handles sit on the corner. The box is padded so the rounded corners still
    cover the original pixels, making the output a superset of ``m``.
    """
    m = as_mask(m)
    pts = np.argwhere(m)
    if len(pts) == 0:
        raise PreconditionError("bezier_bbox_mask of an empty mask")
    if len(pts) == 1:
        return dilate(m, 2)
    if jitter < 0:
        raise ParameterError("jitter must be >= 0 (outward only)")
    (y0, x0), (y1, x1) = pts.min(0).astype(float), pts.max(0).astype(float)
    r = float(corner_radius)
    pad = 0.5 + 0.125 * r + 0.25
    off = rng.uniform(0.0, jitter, size=4) if jitter > 0 else np.zeros(4)
    top, bottom = y0 - pad - off[0], y1 + pad + off[1]
    left, right = x0 - pad - off[2], x1 + pad + off[3]
    r = min(r, (bottom - top) / 2, (right - left) / 2)
    corners = [np.array(p) for p in ((top, right), (bottom, right), (bottom, left), (top, left))]
    # walk clockwise in (row, col); each corner turns from direction a to direction b
    dirs_in = [np.array(d, dtype=float) for d in ((0, 1), (1, 0), (0, -1), (-1, 0))]
    poly = []
    for k, c in enumerate(corners):
        a, b = dirs_in[k], dirs_in[(k + 1) % 4]
        p0 = c - a * r
        p3 = c + b * r
        poly.append(_cubic(p0, c, c, p3))
    path = Path(np.concatenate(poly)[:, ::-1], closed=True)  # to (x, y)
    h, w = m.shape
    rr, cc = np.mgrid[0:h, 0:w]
    inside = path.contains_points(np.stack([cc.ravel(), rr.ravel()], axis=1).astype(float))
    return np.maximum(inside.reshape(h, w).astype(np.uint8), m)


def downsample_mask(m, h2: int, w2: int) -> np.ndarray:
    """Nearest-neighbour downsample: ``out[i, j] = m[floor(i*h/h2), floor(j*w/w2)]``."""
    m = as_mask(m)
    h, w = m.shape
    if h2 > h or w2 > w or h2 < 1 or w2 < 1:
        raise ParameterError(f"cannot resample {h}x{w} mask to {h2}x{w2} (downsampling only)")
    ri = (np.arange(h2) * h) // h2
    ci = (np.arange(w2) * w) // w2
    return m[np.ix_(ri, ci)].copy()


def boundary_ring(m, width: int = 2) -> np.ndarray:
    """Pixels of ``m`` within ``width`` pixels of its boundary (inside the mask)."""
    m = as_mask(m)
    return (m & (1 - erode(m, width))).astype(np.uint8)


def augment_mask(m, mode: str, rng: np.random.Generator) -> np.ndarray:
    """Coarsen a precise attribute mask the way a careless user would draw it."""
    if mode == "mixed":
        mode = ("hull", "dilate", "bezier")[int(rng.integers(3))]
    if mode == "hull":
        return convex_hull(dilate(m, 1))
    if mode == "dilate":
        return dilate(m, int(rng.integers(1, 3)))
    if mode == "bezier":
        return bezier_bbox_mask(m, rng, jitter=1.5)
    raise ParameterError(f"unknown mask augmentation {mode!r}")
