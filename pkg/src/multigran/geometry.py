"""Planar primitives: polygons, boxes, raster masks and the IoU family.

Polygons are ``(k, 2)`` float arrays of ``(x, y)`` vertices, implicitly closed.
Boxes are :class:`AABox` tuples in the same frame. Raster masks are ``(h, w)``
arrays with values in ``[0, 1]``; anything ``>= 0.5`` counts as foreground.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

MASK_THRESHOLD = 0.5
DEFAULT_RASTER_RES = 256


class AABox(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def area(self) -> float:
        return max(self.x_max - self.x_min, 0.0) * max(self.y_max - self.y_min, 0.0)

    def mirror_x(self, width: float) -> "AABox":
        return AABox(width - self.x_max, self.y_min, width - self.x_min, self.y_max)


def as_polygon(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 2 or p.shape[0] < 3:
        raise ValueError(f"polygon needs shape (k>=3, 2), got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("polygon has non-finite coordinates")
    return p


def polygon_to_aabox(p) -> AABox:
    p = as_polygon(p)
    lo = p.min(axis=0)
    hi = p.max(axis=0)
    return AABox(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


def signed_area(p) -> float:
    """Shoelace area; positive when vertices run clockwise on screen (y down)."""
    p = np.asarray(p, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def perimeter(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    return float(np.linalg.norm(np.roll(p, -1, axis=0) - p, axis=1).sum())


def box_iou(a: AABox, b: AABox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 1.0 if tuple(a) == tuple(b) else 0.0
    return inter / union


def box_giou(a: AABox, b: AABox) -> float:
    """Generalized IoU: ``IoU - (hull - union) / hull``, in ``(-1, 1]``."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    hull = (max(a.x_max, b.x_max) - min(a.x_min, b.x_min)) * (
        max(a.y_max, b.y_max) - min(a.y_min, b.y_min)
    )
    if union <= 0.0 or hull <= 0.0:
        return box_iou(a, b)
    return inter / union - (hull - union) / hull


def _winding_inside(p: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Nonzero-winding membership of the sample grid ``xs`` x ``ys``."""
    px = xs[None, :]
    py = ys[:, None]
    winding = np.zeros((ys.size, xs.size), dtype=np.int32)
    q = np.roll(p, -1, axis=0)
    for (x0, y0), (x1, y1) in zip(p, q):
        if y0 == y1:
            continue
        cross = (x1 - x0) * (py - y0) - (px - x0) * (y1 - y0)
        if y0 < y1:
            band = (y0 <= py) & (py < y1)
            winding += (band & (cross > 0)).astype(np.int32)
        else:
            band = (y1 <= py) & (py < y0)
            winding -= (band & (cross < 0)).astype(np.int32)
    return winding != 0


def rasterize_polygon(p, h: int, w: int) -> np.ndarray:
    """Fill ``p`` (pixel coordinates) into an ``h x w`` mask.

    Pixel ``(r, c)`` is foreground when its center ``(c + .5, r + .5)`` has a
    nonzero winding number.
    """
    p = as_polygon(p)
    out = np.zeros((h, w), dtype=np.float64)
    box = polygon_to_aabox(p)
    c0 = max(int(math.floor(box.x_min - 0.5)), 0)
    c1 = min(int(math.ceil(box.x_max + 0.5)), w)
    r0 = max(int(math.floor(box.y_min - 0.5)), 0)
    r1 = min(int(math.ceil(box.y_max + 0.5)), h)
    if c0 >= c1 or r0 >= r1:
        return out
    xs = np.arange(c0, c1, dtype=np.float64) + 0.5
    ys = np.arange(r0, r1, dtype=np.float64) + 0.5
    out[r0:r1, c0:c1] = _winding_inside(p, xs, ys)
    return out


def polygon_iou(a, b, raster_res: int = DEFAULT_RASTER_RES) -> float:
    """IoU of two polygons by rasterizing both on a shared grid.

    The grid covers the union of the two bounding boxes with ``raster_res``
    cells along its longer side, so accuracy does not depend on the
    polygons' absolute scale.
    """
    a = as_polygon(a)
    b = as_polygon(b)
    ba, bb = polygon_to_aabox(a), polygon_to_aabox(b)
    if (
        ba.x_max <= bb.x_min
        or bb.x_max <= ba.x_min
        or ba.y_max <= bb.y_min
        or bb.y_max <= ba.y_min
    ):
        return 0.0
    x0, y0 = min(ba.x_min, bb.x_min), min(ba.y_min, bb.y_min)
    x1, y1 = max(ba.x_max, bb.x_max), max(ba.y_max, bb.y_max)
    side = max(x1 - x0, y1 - y0)
    if side <= 0.0:
        return 0.0
    cell = side / raster_res
    nx = max(int(math.ceil((x1 - x0) / cell - 1e-9)), 1)
    ny = max(int(math.ceil((y1 - y0) / cell - 1e-9)), 1)
    xs = x0 + (np.arange(nx) + 0.5) * cell
    ys = y0 + (np.arange(ny) + 0.5) * cell
    ma = _winding_inside(a, xs, ys)
    mb = _winding_inside(b, xs, ys)
    union = np.count_nonzero(ma | mb)
    if union == 0:
        return 0.0
    return np.count_nonzero(ma & mb) / union


def mask_iou(a, b) -> float:
    """IoU of two masks after thresholding; two empty masks agree (IoU 1)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    ma = a >= MASK_THRESHOLD
    mb = b >= MASK_THRESHOLD
    union = np.count_nonzero(ma | mb)
    if union == 0:
        return 1.0
    return np.count_nonzero(ma & mb) / union


def canonical_polygon(p) -> np.ndarray:
    """Clockwise-on-screen orientation, starting at the top-most (then left-most) vertex."""
    p = as_polygon(p)
    if signed_area(p) < 0:
        p = p[::-1]
    start = np.lexsort((p[:, 0], p[:, 1]))[0]
    return np.roll(p, -start, axis=0)


def resample_polygon(p, k: int) -> np.ndarray:
    """Return ``k`` points equally spaced by arc length along the boundary.

    The walk starts at the top-most, then left-most vertex and runs clockwise
    on screen, which makes the result independent of the input's starting
    vertex and winding direction.
    """
    if k < 4 or k % 2:
        raise ValueError(f"k must be an even integer >= 4, got {k}")
    p = canonical_polygon(p)
    closed = np.vstack([p, p[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    total = seg.sum()
    if total <= 0.0:
        raise ValueError("cannot resample a zero-perimeter polygon")
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    t = np.arange(k) * (total / k)
    idx = np.searchsorted(cum, t, side="right") - 1
    idx = np.clip(idx, 0, len(seg) - 1)
    # skip zero-length edges so the interpolation weight is defined
    frac = np.divide(t - cum[idx], seg[idx], out=np.zeros_like(t), where=seg[idx] > 0)
    return closed[idx] + frac[:, None] * (closed[idx + 1] - closed[idx])


def box_polygon(box: AABox) -> np.ndarray:
    return np.array(
        [
            [box.x_min, box.y_min],
            [box.x_max, box.y_min],
            [box.x_max, box.y_max],
            [box.x_min, box.y_max],
        ]
    )


def cxcywh_to_aabox(cx: float, cy: float, w: float, h: float) -> AABox:
    return AABox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def aabox_to_cxcywh(box: AABox) -> tuple[float, float, float, float]:
    return (
        (box.x_min + box.x_max) / 2,
        (box.y_min + box.y_max) / 2,
        box.x_max - box.x_min,
        box.y_max - box.y_min,
    )


def mask_to_rle(mask) -> list[int]:
    """Row-major run lengths of the thresholded mask, starting with a zero-run."""
    flat = (np.asarray(mask) >= MASK_THRESHOLD).ravel().astype(np.int8)
    if flat.size == 0:
        return []
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_to_mask(runs, h: int, w: int) -> np.ndarray:
    if sum(runs) != h * w:
        raise ValueError(f"run lengths sum to {sum(runs)}, expected {h * w}")
    values = np.zeros(len(runs), dtype=np.float64)
    values[1::2] = 1.0
    return np.repeat(values, runs).reshape(h, w)
