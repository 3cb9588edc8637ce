"""Pair-level detection metrics (SOAP, association AP, instance AP) and inference helpers.

All APs use COCO conventions: per-threshold greedy matching in descending
score order, a monotone precision envelope, and 101-point interpolation.
A category/threshold with no ground truth scores 0 if it has detections and
is left out of the average if it has none.
"""
from __future__ import annotations

import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import Detection, ImageSample
from .decoder import LayerPrediction, predicted_shadow_center
from .masks import AABB, box_iou, mask_iou, mask_to_aabb

RECALL_POINTS = np.linspace(0.0, 1.0, 101)
SIZE_BUCKETS = ("S", "M", "L")


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
    score_threshold: float = 0.3
    max_detections: int = 20
    small_area: float = 32**2
    medium_area: float = 96**2
    soap_object_iou: bool = True
    soap_shadow_iou: bool = True
    soap_union_iou: bool = True

    def validate(self) -> None:
        t = self.iou_thresholds
        if not t or any(not 0 < v <= 1 for v in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError(f"IoU thresholds must lie in (0, 1] and strictly increase, got {t}")


@dataclass
class MetricReport:
    soap_segm: float
    soap_bbox: float
    assoc_ap_segm: float
    assoc_ap_bbox: float
    inst_ap_segm: float
    inst_ap_bbox: float
    per_threshold: dict[str, list[float]] = field(default_factory=dict)
    inst_ap_by_size: dict[str, dict[str, float | None]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def row(self) -> str:
        cols = ["soap_segm", "soap_bbox", "assoc_ap_segm", "assoc_ap_bbox", "inst_ap_segm", "inst_ap_bbox"]
        head = " | ".join(f"{c:>13}" for c in cols)
        vals = " | ".join(f"{100 * getattr(self, c):13.1f}" for c in cols)
        return f"{head}\n{vals}"


# -------------------------------------------------------------- AP core


def ap_from_scored_matches(is_tp: Sequence[bool], num_gt: int) -> float:
    """101-point interpolated AP from TP flags sorted by descending score."""
    flags = np.asarray(is_tp, dtype=bool)
    if num_gt == 0:
        return 0.0
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, np.finfo(float).eps)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    values = np.where(idx < flags.size, envelope[np.minimum(idx, flags.size - 1)], 0.0)
    return float(values.mean())


@dataclass
class _ImageEval:
    """Per-image structures for one AP family: scores, an IoU-test function,
    and ignore flags for GTs/detections (size buckets)."""

    scores: np.ndarray
    ious: np.ndarray  # (D, G, T) per-test IoUs; a match needs all >= tau
    gt_ignore: np.ndarray
    det_ignore_if_unmatched: np.ndarray


def _greedy(img: _ImageEval, tau: float):
    d, g = img.ious.shape[:2]
    order = np.argsort(-img.scores, kind="stable")
    tp = np.zeros(d, dtype=bool)
    ignored = np.zeros(d, dtype=bool)
    taken = np.zeros(g, dtype=bool)
    ok = (img.ious >= tau).all(axis=-1) if g else np.zeros((d, 0), dtype=bool)
    quality = img.ious.mean(axis=-1) if g else np.zeros((d, 0))
    for i in order:
        best, best_q, best_ign = -1, -1.0, True
        for j in range(g):
            if taken[j] or not ok[i, j]:
                continue
            ign = bool(img.gt_ignore[j])
            # prefer real GTs over ignored ones, then higher IoU
            if (best_ign and not ign) or (ign == best_ign and quality[i, j] > best_q):
                best, best_q, best_ign = j, quality[i, j], ign
        if best >= 0:
            taken[best] = True
            if best_ign:
                ignored[i] = True
            else:
                tp[i] = True
        elif img.det_ignore_if_unmatched[i]:
            ignored[i] = True
    return tp, ignored


def _ap(images: list[_ImageEval], thresholds) -> tuple[float | None, list[float | None]]:
    """Mean AP over thresholds; None when there is neither GT nor detection."""
    num_gt = int(sum((~im.gt_ignore).sum() for im in images))
    per = []
    for tau in thresholds:
        scores, flags = [], []
        for im in images:
            tp, ign = _greedy(im, tau)
            keep = ~ign
            scores.append(im.scores[keep])
            flags.append(tp[keep])
        s = np.concatenate(scores) if scores else np.zeros(0)
        f = np.concatenate(flags) if flags else np.zeros(0, dtype=bool)
        if num_gt == 0 and s.size == 0:
            per.append(None)
            continue
        order = np.argsort(-s, kind="stable")
        per.append(ap_from_scored_matches(f[order], num_gt))
    valid = [p for p in per if p is not None]
    return (float(np.mean(valid)) if valid else None), per


def _mean_or_zero(values) -> float:
    valid = [v for v in values if v is not None]
    return float(np.mean(valid)) if valid else 0.0


# ---------------------------------------------------------- region logic


def _binarize(mask) -> np.ndarray:
    m = np.asarray(mask)
    return m if m.dtype == bool else m >= 0.5


def _region_iou(a: np.ndarray, b: np.ndarray, variant: str) -> float:
    if variant == "segm":
        return mask_iou(a, b)
    if variant == "bbox":
        return box_iou(mask_to_aabb(a), mask_to_aabb(b))
    raise ValueError(f"unknown variant {variant!r}")


def _det_regions(det: Detection):
    o = _binarize(det.object_mask)
    s = _binarize(det.shadow_mask)
    return o, s, o | s


def _gt_regions(inst):
    return inst.object_mask, inst.shadow_mask, inst.object_mask | inst.shadow_mask


def _pair_images(dets_per_image, gts_per_image: list[ImageSample], variant: str, tests: tuple[int, ...]) -> list[_ImageEval]:
    out = []
    for dets, sample in zip(dets_per_image, gts_per_image):
        dr = [_det_regions(d) for d in dets]
        gr = [_gt_regions(g) for g in sample.instances]
        ious = np.zeros((len(dr), len(gr), len(tests)))
        for i, d in enumerate(dr):
            for j, g in enumerate(gr):
                for t, comp in enumerate(tests):
                    ious[i, j, t] = _region_iou(d[comp], g[comp], variant)
        out.append(
            _ImageEval(
                scores=np.array([d.score for d in dets], dtype=float),
                ious=ious,
                gt_ignore=np.zeros(len(gr), dtype=bool),
                det_ignore_if_unmatched=np.zeros(len(dr), dtype=bool),
            )
        )
    return out


def soap(dets_per_image, gts_per_image, config: EvalConfig = EvalConfig(), variant: str = "segm", per_threshold=False):
    """Pair AP where object, shadow and union IoU must all clear the threshold."""
    tests = tuple(
        i for i, on in enumerate((config.soap_object_iou, config.soap_shadow_iou, config.soap_union_iou)) if on
    )
    if not tests:
        raise ValueError("SOAP needs at least one IoU test enabled")
    value, per = _ap(_pair_images(dets_per_image, gts_per_image, variant, tests), config.iou_thresholds)
    value = 0.0 if value is None else value
    return (value, per) if per_threshold else value


def association_ap(dets_per_image, gts_per_image, config: EvalConfig = EvalConfig(), variant: str = "segm", per_threshold=False):
    """AP over each pair's union region."""
    value, per = _ap(_pair_images(dets_per_image, gts_per_image, variant, (2,)), config.iou_thresholds)
    value = 0.0 if value is None else value
    return (value, per) if per_threshold else value


def _bucket(area: float, config: EvalConfig) -> str:
    if area < config.small_area:
        return "S"
    if area < config.medium_area:
        return "M"
    return "L"


def _instance_images(dets_per_image, gts_per_image, variant, category: int, config: EvalConfig, bucket: str | None):
    out = []
    for dets, sample in zip(dets_per_image, gts_per_image):
        dm = [_det_regions(d)[category] for d in dets]
        gm = [_gt_regions(g)[category] for g in sample.instances]
        ious = np.zeros((len(dm), len(gm), 1))
        for i, d in enumerate(dm):
            for j, g in enumerate(gm):
                ious[i, j, 0] = _region_iou(d, g, variant)
        if bucket is None:
            gt_ign = np.zeros(len(gm), dtype=bool)
            det_ign = np.zeros(len(dm), dtype=bool)
        else:
            gt_ign = np.array([_bucket(np.count_nonzero(g), config) != bucket for g in gm], dtype=bool)
            det_ign = np.array([_bucket(np.count_nonzero(d), config) != bucket for d in dm], dtype=bool)
        out.append(_ImageEval(np.array([d.score for d in dets], dtype=float), ious, gt_ign, det_ign))
    return out


def instance_ap(dets_per_image, gts_per_image, config: EvalConfig = EvalConfig(), variant: str = "segm", bucket: str | None = None, per_threshold=False):
    """Mean over the object and shadow categories of per-category AP.

    With ``bucket`` in S/M/L, GTs outside the area range are ignored; returns
    None when no category has anything to score in that bucket.
    """
    values, pers = [], []
    for category in (0, 1):
        v, per = _ap(_instance_images(dets_per_image, gts_per_image, variant, category, config, bucket), config.iou_thresholds)
        values.append(v)
        pers.append(per)
    valid = [v for v in values if v is not None]
    if bucket is not None:
        value = float(np.mean(valid)) if valid else None
    else:
        value = float(np.mean(valid)) if valid else 0.0
    if per_threshold:
        merged = [_mean_or_zero([a, b]) for a, b in zip(*pers)]
        return value, merged
    return value


def evaluate(dets_per_image, gts_per_image, config: EvalConfig = EvalConfig()) -> MetricReport:
    config.validate()
    vals, per = {}, {}
    for variant in ("segm", "bbox"):
        vals[f"soap_{variant}"], per[f"soap_{variant}"] = soap(dets_per_image, gts_per_image, config, variant, True)
        vals[f"assoc_ap_{variant}"], per[f"assoc_ap_{variant}"] = association_ap(dets_per_image, gts_per_image, config, variant, True)
        vals[f"inst_ap_{variant}"], per[f"inst_ap_{variant}"] = instance_ap(dets_per_image, gts_per_image, config, variant, None, True)
    per = {k: [0.0 if v is None else v for v in p] for k, p in per.items()}
    sizes = {
        variant: {b: instance_ap(dets_per_image, gts_per_image, config, variant, b) for b in SIZE_BUCKETS}
        for variant in ("segm", "bbox")
    }
    return MetricReport(**vals, per_threshold=per, inst_ap_by_size=sizes)


# -------------------------------------------------------------- inference


def postprocess(
    pred: LayerPrediction,
    grid: tuple[int, int],
    image_size: tuple[int, int],
    config: EvalConfig = EvalConfig(),
    offsets: torch.Tensor | None = None,
    padded_size: tuple[int, int] | None = None,
    b: int = 0,
) -> list[Detection]:
    """Detections for batch item ``b``: score-thresholded, top-k, no NMS.

    Mask logits are bilinearly upsampled to ``padded_size`` (default:
    ``image_size``) and cropped to ``image_size`` before the sigmoid.
    """
    h, w = grid
    scores = torch.sigmoid(pred.class_logits[b].detach()).double()
    order = sorted(range(scores.numel()), key=lambda q: (-float(scores[q]), q))
    keep = [q for q in order if float(scores[q]) >= config.score_threshold][: config.max_detections]
    if not keep:
        return []
    ph, pw = padded_size or image_size
    ih, iw = image_size
    obj = pred.object_mask_logits[b, keep].detach().reshape(-1, 1, h, w)
    sh = pred.shadow_mask_logits[b, keep].detach().reshape(-1, 1, h, w)
    up = lambda x: torch.sigmoid(F.interpolate(x.float(), size=(ph, pw), mode="bilinear", align_corners=False))[:, 0, :ih, :iw]
    obj_up, sh_up = up(obj).numpy(), up(sh).numpy()
    dets = []
    for k, q in enumerate(keep):
        center = None
        if offsets is not None:
            prob = torch.sigmoid(pred.object_mask_logits[b, q].detach()).reshape(h, w)
            c = predicted_shadow_center(prob, offsets[b].detach())
            # offsets are normalized to the padded frame
            center = (float(c[0]) * pw / iw, float(c[1]) * ph / ih)
        dets.append(Detection(score=float(scores[q]), object_mask=obj_up[k], shadow_mask=sh_up[k], predicted_shadow_center=center))
    return dets


@torch.no_grad()
def predict(model, samples: list[ImageSample], config: EvalConfig = EvalConfig(), batch_size: int = 4) -> list[list[Detection]]:
    from .training import to_tensors

    model.eval()
    out_all = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images, _ = to_tensors(chunk)
        images = images.to(next(model.parameters()).dtype)
        out = model(images)
        for b, s in enumerate(chunk):
            out_all.append(
                postprocess(out.predictions[-1], out.grid, (s.height, s.width), config, out.offsets, tuple(images.shape[-2:]), b)
            )
    return out_all


def ground_truth_detections(samples: list[ImageSample]) -> list[list[Detection]]:
    """Oracle adapter: every GT pair as a score-1 detection."""
    return [
        [Detection(1.0, i.object_mask.astype(np.float32), i.shadow_mask.astype(np.float32)) for i in s.instances]
        for s in samples
    ]


# -------------------------------------------------------------- fps


def resize_shape(height: int, width: int, shorter: int, longest: int) -> tuple[int, int]:
    """Scale so the short side is ``shorter`` without the long side exceeding ``longest``."""
    scale = shorter / min(height, width)
    if max(height, width) * scale > longest:
        scale = longest / max(height, width)
    return int(round(height * scale)), int(round(width * scale))


@dataclass
class FpsReport:
    fps: float
    mean_seconds: float
    std_seconds: float
    samples: int


def measure_fps(
    run: Callable[[np.ndarray], object],
    images: Sequence[np.ndarray],
    warmup: int = 5,
    clock: Callable[[], float] = time.perf_counter,
) -> FpsReport:
    """Time ``run(image)`` per image after ``warmup`` untimed calls.

    ``run`` is the full measured path (resize, forward, postprocess, upsample);
    see :func:`model_runner`.
    """
    if not images:
        raise ValueError("no samples to time")
    for i in range(warmup):
        run(images[i % len(images)])
    times = []
    for img in images:
        t0 = clock()
        run(img)
        times.append(clock() - t0)
    mean = statistics.fmean(times)
    std = statistics.pstdev(times) if len(times) > 1 else 0.0
    return FpsReport(fps=1.0 / mean if mean > 0 else math.inf, mean_seconds=mean, std_seconds=std, samples=len(times))


def model_runner(model, shorter: int = 800, longest: int = 1333, config: EvalConfig = EvalConfig()):
    """Closure timing resize + forward + postprocess at the original resolution."""
    from .features import pad_to_multiple

    dtype = next(model.parameters()).dtype
    model.eval()

    @torch.no_grad()
    def run(image: np.ndarray):
        h, w = image.shape[:2]
        x = torch.as_tensor(np.ascontiguousarray(image.transpose(2, 0, 1)), dtype=dtype)[None]
        rh, rw = resize_shape(h, w, shorter, longest)
        x = F.interpolate(x, size=(rh, rw), mode="bilinear", align_corners=False)
        x, _ = pad_to_multiple(x)
        out = model(x)
        # upsample to the padded frame of the original resolution, then crop
        ph = math.ceil(x.shape[-2] * h / rh)
        pw = math.ceil(x.shape[-1] * w / rw)
        return postprocess(out.predictions[-1], out.grid, (h, w), config, out.offsets, (ph, pw))

    return run
