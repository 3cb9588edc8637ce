"""Set-prediction losses: point sampling, object-only matching and every loss term."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import Tensor

from .decoder import LayerPrediction, predicted_shadow_center
from .masks import mask_centroid

log = logging.getLogger(__name__)

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    cls_q: float = 20.0
    cls: float = 2.0
    ce: float = 5.0
    dice: float = 5.0
    direction: float = 0.1
    beta: float = 0.5
    alpha: float = 50.0
    gate_epoch: int = 75

    def validate(self) -> None:
        for name in ("cls_q", "cls", "ce", "dice", "direction", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.gate_epoch < 0:
            raise ValueError("gate_epoch must be nonnegative")


@dataclass(frozen=True)
class SamplingParams:
    oversample: float = 3.0
    importance: float = 0.75


UNIFORM_SAMPLING = SamplingParams(oversample=1.0, importance=0.0)


@dataclass
class PointSample:
    points: Tensor  # (M, K, 2) normalized (x, y)
    labels: Tensor  # (M, K) in {0, 1}
    probs: Tensor  # (M, K)
    inside_box: Tensor  # (M, K) bool


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]

    @property
    def queries(self) -> list[int]:
        return [q for q, _ in self.pairs]

    @property
    def gts(self) -> list[int]:
        return [g for _, g in self.pairs]


# ----------------------------------------------------------------- sampling


def _grid(points: Tensor) -> Tensor:
    return (2 * points - 1)[:, :, None, :]  # (M, K, 1, 2) for grid_sample


def sample_logits(logits: Tensor, points: Tensor) -> Tensor:
    """Bilinear read of (M, h, w) logits at (M, K, 2) normalized points."""
    out = F.grid_sample(logits[:, None], _grid(points).to(logits.dtype), mode="bilinear", padding_mode="border", align_corners=False)
    return out[:, 0, :, 0]


def sample_binary(masks: Tensor, points: Tensor) -> Tensor:
    """Nearest read of (M, H, W) binary masks at (M, K, 2) points."""
    m, h, w = masks.shape
    cols = (points[..., 0] * w).floor().long().clamp(0, w - 1)
    rows = (points[..., 1] * h).floor().long().clamp(0, h - 1)
    idx = torch.arange(m, device=masks.device)[:, None]
    return masks[idx, rows, cols]


def boxes_of(masks: Tensor) -> Tensor:
    """(M, H, W) bool -> (M, 4) inclusive ``x_min, y_min, x_max, y_max``; empty ->(0,0,-1,-1)."""
    out = torch.tensor([[0, 0, -1, -1]] * masks.shape[0], dtype=torch.long)
    for i, m in enumerate(masks):
        rows = torch.nonzero(m.any(dim=1))
        if rows.numel():
            cols = torch.nonzero(m.any(dim=0))
            out[i] = torch.tensor([cols[0, 0], rows[0, 0], cols[-1, 0], rows[-1, 0]])
    return out


def inside_boxes(points: Tensor, boxes: Tensor, height: int, width: int) -> Tensor:
    x = points[..., 0] * width
    y = points[..., 1] * height
    b = boxes.to(points.dtype)[:, None, :]
    return (x >= b[..., 0]) & (x < b[..., 2] + 1) & (y >= b[..., 1]) & (y < b[..., 3] + 1)


def sample_points(
    pred_mask_logits: Tensor,
    gt_masks: Tensor,
    k: int,
    params: SamplingParams = SamplingParams(),
    generator: torch.Generator | None = None,
) -> PointSample:
    """Importance-sample ``k`` points per mask.

    ``oversample * k`` uniform candidates are drawn; the ``ceil(importance * k)``
    whose predicted probability is closest to 0.5 are kept (stable order, so
    ties keep draw order) and the rest are drawn uniformly.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    m = pred_mask_logits.shape[0]
    dtype = pred_mask_logits.dtype
    n_cand = max(int(params.oversample * k), k)
    n_imp = min(math.ceil(params.importance * k), k)
    with torch.no_grad():
        cand = torch.rand(m, n_cand, 2, generator=generator, dtype=dtype)
        if n_imp > 0:
            uncertainty = -sample_logits(pred_mask_logits.detach(), cand).abs()
            order = torch.sort(uncertainty, dim=1, descending=True, stable=True).indices[:, :n_imp]
            imp = torch.gather(cand, 1, order[..., None].expand(-1, -1, 2))
        else:
            imp = cand[:, :0]
        rest = torch.rand(m, k - n_imp, 2, generator=generator, dtype=dtype)
        points = torch.cat([imp, rest], dim=1)
        labels = sample_binary(gt_masks, points).to(dtype)
        h, w = gt_masks.shape[-2:]
        inside = inside_boxes(points, boxes_of(gt_masks), h, w)
    probs = torch.sigmoid(sample_logits(pred_mask_logits, points))
    return PointSample(points=points, labels=labels, probs=probs, inside_box=inside)


# ------------------------------------------------------------------- terms


def bce(probs: Tensor, targets: Tensor) -> Tensor:
    p = probs.clamp(EPS, 1 - EPS)
    return -(targets * p.log() + (1 - targets) * (1 - p).log())


def box_aware_weights(sample: PointSample, weights: LossWeights, epoch: int) -> Tensor:
    if epoch < weights.gate_epoch:
        return torch.ones_like(sample.labels)
    deviant = (~sample.inside_box) & (sample.labels == 0) & (sample.probs.detach() > 0.5)
    return torch.where(deviant, torch.full_like(sample.labels, weights.alpha), torch.ones_like(sample.labels))


def box_aware_ce(sample: PointSample, weights: LossWeights, epoch: int) -> Tensor:
    """Reweighted point BCE, K-averaged per mask then averaged over masks."""
    if sample.labels.numel() == 0:
        return sample.probs.sum() * 0
    w = box_aware_weights(sample, weights, epoch)
    return (w * bce(sample.probs, sample.labels)).mean(dim=1).mean()


def dice_loss(probs: Tensor, targets: Tensor) -> Tensor:
    """Smoothed Dice over points: (M, K) inputs, mean over masks."""
    if probs.numel() == 0:
        return probs.sum() * 0
    if probs.dim() == 1:
        probs, targets = probs[None], targets[None]
    num = 2 * (probs * targets).sum(-1) + 1
    den = probs.sum(-1) + targets.sum(-1) + 1
    return (1 - num / den).mean()


def smooth_l1(diff: Tensor, beta: float) -> Tensor:
    a = diff.abs()
    return torch.where(a < beta, 0.5 * diff**2 / beta, a - 0.5 * beta)


def shadow_direction_loss(pred_centers: Tensor, gt_centers: Tensor, weights: LossWeights) -> Tensor:
    """(M, 2) predicted vs ground-truth shadow centers; summed over x/y, mean over M."""
    if pred_centers.numel() == 0:
        return pred_centers.sum() * 0
    return weights.direction * smooth_l1(pred_centers - gt_centers, weights.beta).sum(-1).mean()


def instance_activation_loss(activation: Tensor, gt_object_masks: Tensor, weights: LossWeights) -> Tensor:
    """Per-cell BCE of an (h, w) probability map against GT object-centroid cells."""
    target = activation_targets(gt_object_masks, *activation.shape)
    return weights.cls_q * bce(activation, target.to(activation.dtype)).mean()


def activation_targets(gt_object_masks: Tensor, height: int, width: int) -> Tensor:
    target = torch.zeros(height, width, dtype=torch.bool)
    for m in gt_object_masks:
        cx, cy = mask_centroid(m.cpu().numpy().astype(bool))
        row = min(int(cy * height), height - 1)
        col = min(int(cx * width), width - 1)
        if target[row, col]:
            log.debug("two object centroids share activation cell (%d, %d)", row, col)
        target[row, col] = True
    return target


# ---------------------------------------------------------------- matching


def hungarian(cost: np.ndarray) -> list[tuple[int, int]]:
    # non-finite costs (a diverged model) still get an assignment so the loss can report the NaN
    cost = np.nan_to_num(cost, nan=1e12, posinf=1e12, neginf=-1e12)
    rows, cols = linear_sum_assignment(cost)
    return [(int(r), int(c)) for r, c in zip(rows, cols)]


def match_costs(object_logits: Tensor, class_logits: Tensor, gt_object_masks: Tensor, points: Tensor, weights: LossWeights) -> Tensor:
    """(N, G) matching cost from object masks and pair scores only.

    ``object_logits`` is (N, h, w); ``points`` a (K, 2) set shared by all pairs.
    """
    n, g = object_logits.shape[0], gt_object_masks.shape[0]
    k = points.shape[0]
    x = sample_logits(object_logits, points[None].expand(n, -1, -1))  # (N, K)
    y = sample_binary(gt_object_masks, points[None].expand(g, -1, -1)).to(x.dtype)  # (G, K)
    pos = F.softplus(-x)
    neg = F.softplus(x)
    cost_ce = (pos @ y.T + neg @ (1 - y).T) / k
    p = x.sigmoid()
    cost_dice = 1 - (2 * p @ y.T + 1) / (p.sum(-1)[:, None] + y.sum(-1)[None] + 1)
    cost_cls = -class_logits.sigmoid()[:, None]
    return weights.cls * cost_cls + weights.ce * cost_ce + weights.dice * cost_dice


@torch.no_grad()
def match(pred: LayerPrediction, b: int, grid: tuple[int, int], gt_object_masks: Tensor, weights: LossWeights, points: Tensor) -> Assignment:
    """Match the queries of batch item ``b`` to GT pairs by their object masks."""
    if gt_object_masks.shape[0] == 0:
        return Assignment([])
    h, w = grid
    logits = pred.object_mask_logits[b].reshape(-1, h, w)
    cost = match_costs(logits, pred.class_logits[b], gt_object_masks, points, weights)
    return Assignment(hungarian(cost.double().cpu().numpy()))


# ---------------------------------------------------------------- assembly


@dataclass
class Target:
    object_masks: Tensor  # (G, H, W) bool
    shadow_masks: Tensor  # (G, H, W) bool

    @property
    def count(self) -> int:
        return self.object_masks.shape[0]

    def shadow_centers(self) -> Tensor:
        return torch.tensor([mask_centroid(m.numpy()) for m in self.shadow_masks], dtype=torch.float64).reshape(-1, 2)


def _stream_terms(logits: Tensor, gt: Tensor, k, params, gen, weights, epoch):
    sample = sample_points(logits, gt, k, params, gen)
    return box_aware_ce(sample, weights, epoch), dice_loss(sample.probs, sample.labels)


def layer_loss(pred, b, grid, target: Target, assignment: Assignment, weights, epoch, k, params, gen) -> Tensor:
    h, w = grid
    cls_logits = pred.class_logits[b]
    cls_target = torch.zeros_like(cls_logits)
    if assignment.pairs:
        cls_target[assignment.queries] = 1
    loss = weights.cls * bce(cls_logits.sigmoid(), cls_target).mean()
    if not assignment.pairs or (weights.ce == 0 and weights.dice == 0):
        return loss
    qi, gi = assignment.queries, assignment.gts
    obj = pred.object_mask_logits[b, qi].reshape(-1, h, w)
    sh = pred.shadow_mask_logits[b, qi].reshape(-1, h, w)
    ce_o, dice_o = _stream_terms(obj, target.object_masks[gi], k, params, gen, weights, epoch)
    ce_s, dice_s = _stream_terms(sh, target.shadow_masks[gi], k, params, gen, weights, epoch)
    return loss + weights.ce * (ce_o + ce_s) + weights.dice * (dice_o + dice_s)


def prediction_loss(predictions, assignments, b, grid, target, weights, epoch, k, params, gen, skip_first=False) -> Tensor:
    total = predictions[0].class_logits.new_zeros(())
    for i, (pred, a) in enumerate(zip(predictions, assignments)):
        if skip_first and i == 0:
            continue
        total = total + layer_loss(pred, b, grid, target, a, weights, epoch, k, params, gen)
    return total


def gt_attention_masks(target: Target, assignment: Assignment, n: int, grid: tuple[int, int]):
    """(N, L) object/shadow attention masks from matched GT masks and the rows they fill."""
    h, w = grid
    obj = torch.zeros(n, h * w, dtype=torch.bool)
    sh = torch.zeros(n, h * w, dtype=torch.bool)
    rows = torch.zeros(n, dtype=torch.bool)
    for q, g in assignment.pairs:
        obj[q] = _downsample(target.object_masks[g], h, w)
        sh[q] = _downsample(target.shadow_masks[g], h, w)
        rows[q] = True
    return obj, sh, rows


def _downsample(mask: Tensor, h: int, w: int) -> Tensor:
    frac = F.adaptive_avg_pool2d(mask[None, None].double(), (h, w))[0, 0]
    return (frac >= 0.5).flatten()


def direction_loss_for(pred: LayerPrediction, offsets: Tensor, b, grid, target: Target, assignment: Assignment, weights):
    if not assignment.pairs or weights.direction == 0:
        return offsets.sum() * 0
    h, w = grid
    probs = pred.object_mask_logits[b].detach().sigmoid().reshape(-1, h, w)
    centers = torch.stack([predicted_shadow_center(probs[q], offsets[b]) for q in assignment.queries])
    gt = target.shadow_centers()[assignment.gts].to(centers.dtype)
    return shadow_direction_loss(centers, gt, weights)
