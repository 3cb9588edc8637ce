"""Procedural scenes with exact paired object/shadow masks.

Each object is a filled convex polygon (an ellipse is its many-vertex case).
Its shadow is an affine image of the silhouette: translated along the scene's
light direction, stretched along it and sheared across it.  All shadows are
rendered first as darkened background, then objects in drawing order; any
shadow pixel covered by an object, and any object pixel covered by a later
object, is removed from the corresponding mask.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import ImageSample, ShadowObjectInstance
from .masks import mask_centroid


@dataclass(frozen=True)
class SceneConfig:
    height: int = 128
    width: int = 128
    pair_range: tuple[int, int] = (1, 4)
    light_angle_range: tuple[float, float] = (0.0, 2 * math.pi)
    object_radius_range: tuple[float, float] = (10.0, 20.0)
    shadow_length_range: tuple[float, float] = (0.9, 1.5)  # in object radii
    shadow_stretch_range: tuple[float, float] = (0.8, 1.4)
    shadow_shear_range: tuple[float, float] = (-0.4, 0.4)
    shadow_darkness_range: tuple[float, float] = (0.35, 0.6)
    max_overlap: float = 0.1
    min_pixels: int = 40
    max_attempts: int = 500

    def validate(self) -> None:
        if self.height <= 0 or self.width <= 0:
            raise ValueError(f"image size must be positive, got {self.height}x{self.width}")
        lo, hi = self.pair_range
        if lo < 1 or hi < lo:
            raise ValueError(f"empty pair range {self.pair_range}")
        if self.object_radius_range[0] <= 0 or self.object_radius_range[1] < self.object_radius_range[0]:
            raise ValueError(f"invalid object radius range {self.object_radius_range}")


def _fill_convex(vertices: np.ndarray, height: int, width: int) -> np.ndarray:
    """Pixel-center rasterization of a counter-clockwise convex polygon."""
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs + 0.5
    py = ys + 0.5
    inside = np.ones((height, width), dtype=bool)
    nxt = np.roll(vertices, -1, axis=0)
    for (x0, y0), (x1, y1) in zip(vertices, nxt):
        inside &= (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0) >= 0
    return inside


def _ccw(vertices: np.ndarray) -> np.ndarray:
    x, y = vertices[:, 0], vertices[:, 1]
    signed = np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    return vertices if signed > 0 else vertices[::-1]


def _random_silhouette(rng: np.random.Generator, center: np.ndarray, cfg: SceneConfig) -> np.ndarray:
    r_lo, r_hi = cfg.object_radius_range
    if rng.random() < 0.5:
        a, b = rng.uniform(r_lo, r_hi, size=2)
        rot = rng.uniform(0, math.pi)
        t = np.linspace(0, 2 * math.pi, 48, endpoint=False)
        pts = np.stack([a * np.cos(t), b * np.sin(t)], axis=1)
    else:
        k = int(rng.integers(5, 9))
        t = np.sort(rng.uniform(0, 2 * math.pi, size=k))
        radius = rng.uniform(r_lo, r_hi, size=k)
        pts = np.stack([radius * np.cos(t), radius * np.sin(t)], axis=1)
        pts = _convex_hull(pts)
        rot = 0.0
    c, s = math.cos(rot), math.sin(rot)
    pts = pts @ np.array([[c, s], [-s, c]])
    return _ccw(pts + center)


def _convex_hull(points: np.ndarray) -> np.ndarray:
    pts = sorted(map(tuple, points))

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _cast_shadow(vertices: np.ndarray, light: np.ndarray, rng: np.random.Generator, cfg: SceneConfig) -> np.ndarray:
    center = vertices.mean(axis=0)
    radius = np.linalg.norm(vertices - center, axis=1).max()
    length = rng.uniform(*cfg.shadow_length_range) * radius
    stretch = rng.uniform(*cfg.shadow_stretch_range)
    shear = rng.uniform(*cfg.shadow_shear_range)
    perp = np.array([-light[1], light[0]])
    # A = I + (stretch - 1) d d^T + shear d perp^T, applied about the center
    A = np.eye(2) + (stretch - 1) * np.outer(light, light) + shear * np.outer(light, perp)
    shadow = (vertices - center) @ A.T + center + light * length
    return _ccw(shadow)


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    c0 = rng.uniform(0.45, 0.9, size=3)
    c1 = rng.uniform(0.45, 0.9, size=3)
    angle = rng.uniform(0, 2 * math.pi)
    ys, xs = np.mgrid[0:h, 0:w]
    t = (math.cos(angle) * xs / w + math.sin(angle) * ys / h + 1.0) / 2.0
    img = c0 * (1 - t[..., None]) + c1 * t[..., None]
    img += rng.normal(0.0, 0.015, size=img.shape)
    return img


def generate_synthetic_scene(seed: int, config: SceneConfig | None = None) -> ImageSample:
    """Deterministic scene for ``(seed, config)``."""
    cfg = config or SceneConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width

    angle = rng.uniform(*cfg.light_angle_range)
    light = np.array([math.cos(angle), math.sin(angle)])
    n_pairs = int(rng.integers(cfg.pair_range[0], cfg.pair_range[1] + 1))

    objects: list[np.ndarray] = []
    shadows: list[np.ndarray] = []
    for _ in range(cfg.max_attempts):
        if len(objects) == n_pairs:
            break
        margin = cfg.object_radius_range[0]
        center = np.array([rng.uniform(margin, w - margin), rng.uniform(margin, h - margin)])
        verts = _random_silhouette(rng, center, cfg)
        obj = _fill_convex(verts, h, w)
        sil = _fill_convex(_cast_shadow(verts, light, rng, cfg), h, w)
        region = obj | sil
        taken = np.zeros((h, w), dtype=bool)
        for o, s in zip(objects, shadows):
            taken |= o | s
        if np.count_nonzero(region & taken) > cfg.max_overlap * np.count_nonzero(region):
            continue
        cand_obj, cand_sh = [*objects, obj], [*shadows, sil]
        if _visible(cand_obj, cand_sh, light, cfg) is None:
            continue
        objects, shadows = cand_obj, cand_sh
    if len(objects) < cfg.pair_range[0]:
        raise RuntimeError(f"seed {seed}: could not place {cfg.pair_range[0]} pairs in {cfg.max_attempts} attempts")

    vis_obj, vis_sh = _visible(objects, shadows, light, cfg)
    image = _background(rng, h, w)
    shade = np.ones((h, w))
    for sil in shadows:
        shade = np.where(sil, np.minimum(shade, rng.uniform(*cfg.shadow_darkness_range)), shade)
    image = image * shade[..., None]
    ys, xs = np.mgrid[0:h, 0:w]
    for obj in objects:
        color = rng.uniform(0.1, 1.0, size=3)
        color[rng.integers(0, 3)] = rng.uniform(0.85, 1.0)
        ramp = 0.85 + 0.15 * ((xs * light[0] + ys * light[1]) % 17) / 17.0
        image = np.where(obj[..., None], color * ramp[..., None], image)
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0

    instances = [
        ShadowObjectInstance(object_mask=o, shadow_mask=s, pair_id=i + 1)
        for i, (o, s) in enumerate(zip(vis_obj, vis_sh))
    ]
    return ImageSample(image=image.astype(np.float32), instances=instances, source_id=f"scene_{seed:06d}")


def _visible(objects, shadows, light, cfg):
    """Occlusion-resolved masks, or None if any pair fails the visibility checks."""
    h, w = objects[0].shape
    all_obj = np.zeros((h, w), dtype=bool)
    for o in objects:
        all_obj |= o
    vis_obj = []
    for i, o in enumerate(objects):
        later = np.zeros((h, w), dtype=bool)
        for o2 in objects[i + 1 :]:
            later |= o2
        vis_obj.append(o & ~later)
    vis_sh = [s & ~all_obj for s in shadows]
    for o, s in zip(vis_obj, vis_sh):
        if np.count_nonzero(o) < cfg.min_pixels or np.count_nonzero(s) < cfg.min_pixels:
            return None
        co = np.array(mask_centroid(o)) * (w, h)
        cs = np.array(mask_centroid(s)) * (w, h)
        if np.dot(cs - co, light) <= 0:
            return None
    return vis_obj, vis_sh


def generate_dataset(seed: int, n: int, config: SceneConfig | None = None) -> list[ImageSample]:
    base = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1)[0]) for s in base.spawn(n)]
    samples = []
    for i, s in enumerate(seeds):
        sample = generate_synthetic_scene(s, config)
        sample.source_id = f"scene_{seed}_{i:05d}"
        samples.append(sample)
    return samples
