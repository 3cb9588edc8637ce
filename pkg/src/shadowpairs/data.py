"""Paired shadow-object annotations and their JSON/PNG on-disk format.

File layout::

    {"images": [{"id", "file_name", "height", "width"}],
     "annotations": [{"id", "image_id", "category": "object" | "shadow",
                      "segmentation": {"size": [h, w], "counts": [...]},
                      "association_id"}]}

Detections use the same layout with an extra ``score`` per annotation and an
optional ``shadow_center`` on the shadow record.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .masks import as_binary, rle_decode, rle_encode

log = logging.getLogger(__name__)

CATEGORIES = ("object", "shadow")


class AnnotationError(ValueError):
    pass


@dataclass
class ShadowObjectInstance:
    object_mask: np.ndarray
    shadow_mask: np.ndarray
    pair_id: int

    def __post_init__(self):
        self.object_mask = as_binary(self.object_mask)
        self.shadow_mask = as_binary(self.shadow_mask)
        if self.object_mask.shape != self.shadow_mask.shape:
            raise ValueError("object and shadow masks must share dimensions")
        if not self.object_mask.any():
            raise ValueError(f"pair {self.pair_id}: empty object mask")
        if not self.shadow_mask.any():
            raise ValueError(f"pair {self.pair_id}: empty shadow mask")

    @property
    def union_mask(self) -> np.ndarray:
        return self.object_mask | self.shadow_mask


@dataclass
class ImageSample:
    image: np.ndarray
    instances: list[ShadowObjectInstance] = field(default_factory=list)
    source_id: str = ""

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"image must be HxWx3, got {img.shape}")
        self.image = img
        ids = [inst.pair_id for inst in self.instances]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{self.source_id}: duplicate pair ids {ids}")
        for inst in self.instances:
            if inst.object_mask.shape != img.shape[:2]:
                raise ValueError(f"{self.source_id}: mask shape {inst.object_mask.shape} != image {img.shape[:2]}")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass
class Detection:
    score: float
    object_mask: np.ndarray
    shadow_mask: np.ndarray
    predicted_shadow_center: tuple[float, float] | None = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if np.shape(self.object_mask) != np.shape(self.shadow_mask):
            raise ValueError("detection masks must share dimensions")


# --------------------------------------------------------------------------- io


def _require(record: dict, key: str, where: str):
    if not isinstance(record, dict) or key not in record:
        raise AnnotationError(f"{where}: missing key '{key}'")
    return record[key]


def _parse(doc, with_scores: bool):
    """Yield (image record, {assoc_id: {category: annotation}}) per image."""
    if not isinstance(doc, dict):
        raise AnnotationError("top level must be a JSON object")
    images = _require(doc, "images", "file")
    anns = _require(doc, "annotations", "file")
    if not isinstance(images, list):
        raise AnnotationError("'images' must be a list")
    if not isinstance(anns, list):
        raise AnnotationError("'annotations' must be a list")

    by_image: dict[int, dict[int, dict[str, dict]]] = {}
    meta = {}
    for i, rec in enumerate(images):
        where = f"images[{i}]"
        for key in ("id", "file_name", "height", "width"):
            _require(rec, key, where)
        meta[rec["id"]] = rec
        by_image[rec["id"]] = {}

    for i, ann in enumerate(anns):
        where = f"annotations[{i}]"
        keys = ["id", "image_id", "category", "segmentation", "association_id"]
        if with_scores:
            keys.append("score")
        for key in keys:
            _require(ann, key, where)
        if ann["category"] not in CATEGORIES:
            raise AnnotationError(f"{where}: key 'category' must be one of {CATEGORIES}, got {ann['category']!r}")
        seg = ann["segmentation"]
        _require(seg, "size", f"{where}.segmentation")
        _require(seg, "counts", f"{where}.segmentation")
        if ann["image_id"] not in by_image:
            raise AnnotationError(f"{where}: key 'image_id' refers to unknown image {ann['image_id']}")
        pairs = by_image[ann["image_id"]].setdefault(ann["association_id"], {})
        if ann["category"] in pairs:
            raise AnnotationError(
                f"image {ann['image_id']}: association id {ann['association_id']} has more than one {ann['category']}"
            )
        pairs[ann["category"]] = ann

    for image_id, pairs in by_image.items():
        rec = meta[image_id]
        for assoc, members in pairs.items():
            missing = [c for c in CATEGORIES if c not in members]
            if missing:
                raise AnnotationError(
                    f"image {image_id} ({rec['file_name']}): association id {assoc} has no {missing[0]} partner"
                )
            for c in CATEGORIES:
                size = list(members[c]["segmentation"]["size"])
                if size != [rec["height"], rec["width"]]:
                    raise AnnotationError(
                        f"image {image_id}: association id {assoc} {c} mask size {size} "
                        f"!= image size {[rec['height'], rec['width']]}"
                    )
        yield rec, pairs


def _read_json(path: Path):
    if not path.is_file():
        raise FileNotFoundError(f"annotation file not found: {path}")
    with open(path) as f:
        return json.load(f)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def write_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_annotations(path, image_dir=None) -> list[ImageSample]:
    """Load a paired annotation file; images resolve relative to ``image_dir``
    (default: the annotation file's directory)."""
    path = Path(path)
    doc = _read_json(path)
    image_dir = Path(image_dir) if image_dir is not None else path.parent
    samples = []
    for rec, pairs in _parse(doc, with_scores=False):
        image = read_image(image_dir / rec["file_name"])
        if image.shape[:2] != (rec["height"], rec["width"]):
            raise AnnotationError(f"image {rec['id']}: PNG size {image.shape[:2]} != declared size")
        instances = [
            ShadowObjectInstance(
                object_mask=rle_decode(m["object"]["segmentation"]),
                shadow_mask=rle_decode(m["shadow"]["segmentation"]),
                pair_id=int(assoc),
            )
            for assoc, m in sorted(pairs.items())
        ]
        samples.append(ImageSample(image=image, instances=instances, source_id=str(rec["file_name"])))
    return samples


def _image_records(samples: list[ImageSample]) -> list[dict]:
    out = []
    for i, s in enumerate(samples):
        if not s.source_id:
            name = f"{i:06d}.png"
        else:
            name = s.source_id if s.source_id.endswith(".png") else f"{s.source_id}.png"
        out.append({"id": i, "file_name": name, "height": s.height, "width": s.width})
    return out


def save_annotations(samples: list[ImageSample], out_dir, name: str = "annotations.json") -> Path:
    """Write PNGs plus one annotation JSON into ``out_dir``; returns the JSON path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = _image_records(samples)
    anns = []
    for rec, s in zip(images, samples):
        write_image(out_dir / rec["file_name"], s.image)
        for inst in s.instances:
            for cat, mask in (("object", inst.object_mask), ("shadow", inst.shadow_mask)):
                anns.append(
                    {
                        "id": len(anns) + 1,
                        "image_id": rec["id"],
                        "category": cat,
                        "segmentation": rle_encode(mask),
                        "association_id": int(inst.pair_id),
                    }
                )
    path = out_dir / name
    with open(path, "w") as f:
        json.dump({"images": images, "annotations": anns}, f)
    return path


def save_detections(path, images: list[dict], detections: list[list[Detection]], threshold: float = 0.5) -> None:
    """Export detections in the annotation schema plus ``score``.

    ``images`` are image records (id, file_name, height, width) aligned with
    ``detections``.  Probability masks are binarized at ``threshold``.
    """
    anns = []
    for rec, dets in zip(images, detections):
        for k, det in enumerate(dets):
            for cat, mask in (("object", det.object_mask), ("shadow", det.shadow_mask)):
                ann = {
                    "id": len(anns) + 1,
                    "image_id": rec["id"],
                    "category": cat,
                    "segmentation": rle_encode(np.asarray(mask) >= threshold),
                    "association_id": k + 1,
                    "score": float(det.score),
                }
                if cat == "shadow" and det.predicted_shadow_center is not None:
                    ann["shadow_center"] = [float(v) for v in det.predicted_shadow_center]
                anns.append(ann)
    with open(path, "w") as f:
        json.dump({"images": images, "annotations": anns}, f)


def load_detections(path) -> tuple[list[dict], list[list[Detection]]]:
    """Inverse of :func:`save_detections`; masks come back as boolean grids."""
    doc = _read_json(Path(path))
    images, dets = [], []
    for rec, pairs in _parse(doc, with_scores=True):
        out = []
        for _, m in sorted(pairs.items()):
            center = m["shadow"].get("shadow_center")
            out.append(
                Detection(
                    score=float(m["object"]["score"]),
                    object_mask=rle_decode(m["object"]["segmentation"]),
                    shadow_mask=rle_decode(m["shadow"]["segmentation"]),
                    predicted_shadow_center=tuple(center) if center is not None else None,
                )
            )
        images.append({k: rec[k] for k in ("id", "file_name", "height", "width")})
        dets.append(out)
    return images, dets
