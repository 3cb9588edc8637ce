"""Total loss and the training loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import torch

from .data import ImageSample
from .features import pad_to_multiple
from .losses import (
    LossWeights,
    SamplingParams,
    Target,
    direction_loss_for,
    gt_attention_masks,
    instance_activation_loss,
    match,
    prediction_loss,
)
from .model import ModelConfig, ModelOutput, PairDetector

log = logging.getLogger(__name__)

TERMS = ("L_IA_q", "L_pred", "L_pred_gt", "L_d")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.05
    warmup_iters: int = 1000
    epochs: int = 100
    batch_size: int = 4
    points: int = 1024
    seed: int = 0
    scale_gate_epoch: bool = True
    gt_guided: bool = True
    grad_clip: float = 0.0

    def validate(self) -> None:
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1 or self.points < 1:
            raise ValueError("lr, epochs, batch_size and points must be positive")
        if self.weight_decay < 0 or self.warmup_iters < 0:
            raise ValueError("weight_decay and warmup_iters must be nonnegative")

    def gate_epoch(self, weights: LossWeights) -> int:
        """Box-aware gate, rescaled to keep its fraction of a 100-epoch run."""
        if not self.scale_gate_epoch or self.epochs == 100:
            return weights.gate_epoch
        return math.ceil(weights.gate_epoch / 100 * self.epochs)


class TrainingDiverged(RuntimeError):
    pass


def lr_at(step: int, base: float, warmup: int, total: int) -> float:
    """Learning rate for 1-indexed iteration ``step``: linear warmup, then cosine to 0."""
    if warmup > 0 and step <= warmup:
        return base * step / warmup
    span = max(total - warmup, 1)
    progress = min(max((step - warmup) / span, 0.0), 1.0)
    return base * 0.5 * (1 + math.cos(math.pi * progress))


# ------------------------------------------------------------------ batches


def to_tensors(samples: list[ImageSample], dtype=torch.float32):
    """Stack images (padded to the stride) and per-sample targets."""
    images, targets = [], []
    for s in samples:
        img = torch.as_tensor(np.ascontiguousarray(s.image.transpose(2, 0, 1)), dtype=dtype)
        img, _ = pad_to_multiple(img)
        images.append(img)
        h, w = img.shape[-2:]
        if s.instances:
            obj = torch.stack([torch.as_tensor(i.object_mask) for i in s.instances])
            sh = torch.stack([torch.as_tensor(i.shadow_mask) for i in s.instances])
            obj, _ = pad_to_multiple(obj)
            sh, _ = pad_to_multiple(sh)
        else:
            obj = torch.zeros(0, h, w, dtype=torch.bool)
            sh = torch.zeros(0, h, w, dtype=torch.bool)
        targets.append(Target(object_masks=obj, shadow_masks=sh))
    return torch.stack(images), targets


# --------------------------------------------------------------------- loss


def total_loss(
    model: PairDetector,
    images: torch.Tensor,
    targets: list[Target],
    weights: LossWeights,
    epoch: int,
    points: int = 1024,
    generator: torch.Generator | None = None,
    sampling: SamplingParams = SamplingParams(),
    gt_guided: bool = True,
    output: ModelOutput | None = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Batch-mean of L_IA_q + L_pred + L_pred_gt + L_d with the per-term breakdown."""
    out = output if output is not None else model(images)
    grid = out.grid
    n = out.queries.n
    bsz = images.shape[0]
    sums = {t: images.new_zeros(()) for t in TERMS}
    last_assign = []
    for b, target in enumerate(targets):
        match_points = torch.rand(points, 2, generator=generator, dtype=images.dtype)
        assigns = [match(p, b, grid, target.object_masks, weights, match_points) for p in out.predictions]
        last_assign.append(assigns[-1])
        act = torch.sigmoid(out.activation_logits[b])
        sums["L_IA_q"] = sums["L_IA_q"] + instance_activation_loss(act, target.object_masks, weights)
        sums["L_pred"] = sums["L_pred"] + prediction_loss(
            out.predictions, assigns, b, grid, target, weights, epoch, points, sampling, generator
        )
        sums["L_d"] = sums["L_d"] + direction_loss_for(out.predictions[-1], out.offsets, b, grid, target, assigns[-1], weights)

    if gt_guided:
        masks = [gt_attention_masks(t, a, n, grid) for t, a in zip(targets, last_assign)]
        obj = torch.stack([m[0] for m in masks])
        sh = torch.stack([m[1] for m in masks])
        rows = torch.stack([m[2] for m in masks])
        guided = model.decode(out.initial, (obj, sh), rows).predictions
        for b, (target, a) in enumerate(zip(targets, last_assign)):
            sums["L_pred_gt"] = sums["L_pred_gt"] + prediction_loss(
                guided, [a] * len(guided), b, grid, target, weights, epoch, points, sampling, generator, skip_first=True
            )

    terms = {t: v / bsz for t, v in sums.items()}
    total = terms["L_IA_q"] + terms["L_pred"] + terms["L_pred_gt"] + terms["L_d"]
    return total, terms


# --------------------------------------------------------------------- loop


@dataclass
class FitResult:
    model: PairDetector
    optimizer: torch.optim.Optimizer
    epoch: int
    iteration: int
    history: list[dict] = field(default_factory=list)


Callback = Callable[[str, "Trainer"], None]


class Trainer:
    def __init__(self, dataset: list[ImageSample], model_config: ModelConfig, config: TrainConfig, weights: LossWeights):
        if not dataset:
            raise ValueError("training dataset is empty")
        config.validate()
        weights.validate()
        self.config = config
        self.weights = weights
        self.gate_epoch = config.gate_epoch(weights)
        torch.manual_seed(config.seed)
        self.model = PairDetector(model_config)
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
        self.images, self.targets = to_tensors(dataset)
        self.iters_per_epoch = math.ceil(len(dataset) / config.batch_size)
        self.total_iters = self.iters_per_epoch * config.epochs
        self.epoch = 0  # next epoch to run
        self.iteration = 0  # completed iterations
        self.history: list[dict] = []

    def epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.config.seed, epoch]).permutation(len(self.targets))

    def run(self, callbacks: tuple[Callback, ...] = (), stop_after_epoch: int | None = None) -> FitResult:
        cfg = self.config
        weights = self.weights
        loss_weights = replace(weights, gate_epoch=self.gate_epoch)
        self.model.train()
        while self.epoch < cfg.epochs:
            order = self.epoch_order(self.epoch)
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                step = self.iteration + 1
                lr = lr_at(step, cfg.lr, cfg.warmup_iters, self.total_iters)
                for group in self.optimizer.param_groups:
                    group["lr"] = lr
                gen = torch.Generator().manual_seed(cfg.seed * 1_000_003 + step)
                total, terms = total_loss(
                    self.model,
                    self.images[idx],
                    [self.targets[i] for i in idx],
                    loss_weights,
                    self.epoch,
                    cfg.points,
                    gen,
                    gt_guided=cfg.gt_guided,
                )
                record = {"epoch": self.epoch, "iter": step, "lr": lr, "total": float(total.detach())}
                record.update({k: float(v.detach()) for k, v in terms.items()})
                if not math.isfinite(record["total"]):
                    raise TrainingDiverged(f"non-finite loss at epoch {self.epoch}, iteration {step}: {json.dumps(record)}")
                self.optimizer.zero_grad(set_to_none=True)
                total.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
                self.optimizer.step()
                self.iteration = step
                self.history.append(record)
                for cb in callbacks:
                    cb("iteration", self)
            self.epoch += 1
            for cb in callbacks:
                cb("epoch_end", self)
            if stop_after_epoch is not None and self.epoch >= stop_after_epoch:
                break
        return FitResult(self.model, self.optimizer, self.epoch, self.iteration, self.history)


def fit(
    dataset: list[ImageSample],
    config: TrainConfig,
    weights: LossWeights = LossWeights(),
    callbacks: tuple[Callback, ...] = (),
    model_config: ModelConfig = ModelConfig(),
) -> FitResult:
    return Trainer(dataset, model_config, config, weights).run(callbacks)


def jsonl_logger(path) -> Callback:
    """Callback appending one JSON record per iteration."""

    def cb(event: str, trainer: Trainer) -> None:
        if event == "iteration":
            rec = trainer.history[-1]
            with open(path, "a") as f:
                f.write(json.dumps({k: rec[k] for k in ("epoch", "iter", "lr", "total", *TERMS)}) + "\n")

    return cb
