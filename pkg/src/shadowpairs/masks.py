"""Mask geometry: IoU, bounding boxes, centroids and COCO-style RLE."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AABB:
    """Inclusive pixel box. ``x`` is the column axis, ``y`` the row axis.

    The value returned by :meth:`empty` is the only box allowed to have
    ``x_min > x_max``; it contains nothing and has zero area.
    """

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    @classmethod
    def empty(cls) -> "AABB":
        return cls(0, 0, -1, -1)

    @property
    def is_empty(self) -> bool:
        return self.x_min > self.x_max or self.y_min > self.y_max

    @property
    def area(self) -> int:
        if self.is_empty:
            return 0
        return (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)

    def contains(self, x: float, y: float) -> bool:
        """Pixel-coordinate containment; a pixel (col, row) covers [col, col+1)."""
        if self.is_empty:
            return False
        return self.x_min <= x < self.x_max + 1 and self.y_min <= y < self.y_max + 1

    def to_mask(self, height: int, width: int) -> np.ndarray:
        out = np.zeros((height, width), dtype=bool)
        if not self.is_empty:
            out[self.y_min : self.y_max + 1, self.x_min : self.x_max + 1] = True
        return out

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def as_binary(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2 or m.shape[0] <= 0 or m.shape[1] <= 0:
        raise ValueError(f"mask must be a non-empty 2-D grid, got shape {m.shape}")
    if m.dtype != bool:
        if not np.isin(m, (0, 1)).all():
            raise ValueError("binary mask values must be 0 or 1")
        m = m.astype(bool)
    return m


def mask_iou(a, b) -> float:
    a = as_binary(a)
    b = as_binary(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def mask_to_aabb(mask) -> AABB:
    m = as_binary(mask)
    rows = np.flatnonzero(m.any(axis=1))
    if rows.size == 0:
        return AABB.empty()
    cols = np.flatnonzero(m.any(axis=0))
    return AABB(int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))


def box_iou(a: AABB, b: AABB) -> float:
    if a.is_empty or b.is_empty:
        return 0.0
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min) + 1
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min) + 1
    inter = max(ix, 0) * max(iy, 0)
    return inter / (a.area + b.area - inter)


def mask_centroid(mask) -> tuple[float, float]:
    """Normalized ``(x, y)`` centroid using pixel centers.

    Boolean masks use the plain mean of set pixels.  Probability masks are
    thresholded at 0.5 and weighted by the surviving probabilities.  When
    nothing survives, the center of the argmax pixel is returned.
    """
    m = np.asarray(mask)
    h, w = m.shape
    if m.dtype == bool:
        weights = m.astype(np.float64)
    else:
        m = m.astype(np.float64)
        weights = np.where(m >= 0.5, m, 0.0)
    total = weights.sum()
    if total <= 0:
        r, c = np.unravel_index(int(np.argmax(m)), m.shape)
        return ((c + 0.5) / w, (r + 0.5) / h)
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    cy = float((weights.sum(axis=1) * ys).sum() / total)
    cx = float((weights.sum(axis=0) * xs).sum() / total)
    return (cx, cy)


def rle_encode(mask) -> dict:
    """Uncompressed COCO RLE: column-major runs, starting with a 0-run."""
    m = as_binary(mask)
    flat = m.flatten(order="F").astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0] == 1:
        counts = [0] + counts
    return {"size": [int(m.shape[0]), int(m.shape[1])], "counts": [int(c) for c in counts]}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = (int(v) for v in rle["size"])
    counts = np.asarray(rle["counts"], dtype=np.int64)
    if h <= 0 or w <= 0:
        raise ValueError(f"invalid RLE size {rle['size']}")
    if (counts < 0).any() or counts.sum() != h * w:
        raise ValueError(f"RLE counts sum to {counts.sum()}, expected {h * w}")
    values = np.arange(counts.size) % 2 == 1
    flat = np.repeat(values, counts)
    return flat.reshape((w, h)).T.copy()
