"""Overlay rendering: one hue per detected pair, with a centroid-to-shadow-center line."""
from __future__ import annotations

import colorsys

import numpy as np
from PIL import Image, ImageDraw

from .data import Detection
from .masks import mask_centroid

GOLDEN = 0.618033988749895


def pair_color(index: int, value: float = 1.0) -> tuple[int, int, int]:
    r, g, b = colorsys.hsv_to_rgb((index * GOLDEN) % 1.0, 0.85, value)
    return int(round(255 * r)), int(round(255 * g)), int(round(255 * b))


def to_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.copy()
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def render_overlay(image: np.ndarray, detections: list[Detection], opacity: float = 0.5, threshold: float = 0.5) -> np.ndarray:
    """Composite detections over an (H, W, 3) image and return uint8 RGB.

    Objects use the pair's hue at full value, shadows a darker shade of it.
    The line runs from the object centroid to the predicted shadow center
    (the shadow-mask centroid when no prediction is attached).
    """
    out = to_uint8(image)
    if not detections:
        return out
    h, w = out.shape[:2]
    canvas = out.astype(np.float64)
    lines = []
    for k, det in enumerate(detections):
        obj = np.asarray(det.object_mask) >= threshold
        sh = np.asarray(det.shadow_mask) >= threshold
        for mask, value in ((sh, 0.55), (obj, 1.0)):
            color = np.array(pair_color(k, value), dtype=np.float64)
            canvas[mask] = (1 - opacity) * canvas[mask] + opacity * color
        if obj.any():
            start = mask_centroid(obj)
            end = det.predicted_shadow_center or (mask_centroid(sh) if sh.any() else None)
            if end is not None:
                lines.append((k, start, end))
    img = Image.fromarray(np.clip(np.round(canvas), 0, 255).astype(np.uint8), mode="RGB")
    draw = ImageDraw.Draw(img)
    for k, (x0, y0), (x1, y1) in lines:
        draw.line([(x0 * w, y0 * h), (x1 * w, y1 * h)], fill=pair_color(k), width=max(1, min(h, w) // 100))
    return np.asarray(img)
