"""Desk-scale experiments shared by ``scripts/`` and the acceptance suite."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace

from .evaluation import EvalConfig, MetricReport, evaluate, predict
from .features import ExtractorConfig
from .losses import LossWeights
from .model import ModelConfig
from .synthetic import SceneConfig, generate_dataset
from .training import TrainConfig, Trainer

log = logging.getLogger(__name__)

DESK_MODEL = ModelConfig(
    extractor=ExtractorConfig(channel_count=32, stem_width=16, stage_widths=(32, 64, 128)),
    num_layers=1,
    n_activation=20,
    n_auxiliary=4,
)
# 500 epochs of 16 scenes at batch 4 = 2000 iterations
OVERFIT_TRAIN = TrainConfig(lr=1e-3, warmup_iters=100, epochs=500, batch_size=4, points=1024, seed=0)


@dataclass
class RunResult:
    report: MetricReport
    final_loss: float
    iterations: int
    seconds: float


def _progress(every: int, samples):
    start = time.perf_counter()

    def cb(event, trainer):
        if event == "epoch_end" and every and trainer.epoch % every == 0:
            rec = trainer.history[-1]
            log.info("epoch %d iter %d loss %.4f (%.0fs)", trainer.epoch, rec["iter"], rec["total"], time.perf_counter() - start)

    return cb


def train_and_evaluate(train_set, eval_set, model_config: ModelConfig, train_config: TrainConfig, weights: LossWeights, eval_config=EvalConfig(), log_every=0) -> RunResult:
    start = time.perf_counter()
    trainer = Trainer(train_set, model_config, train_config, weights)
    result = trainer.run((_progress(log_every, train_set),))
    report = evaluate(predict(trainer.model, eval_set, eval_config), eval_set, eval_config)
    return RunResult(report, result.history[-1]["total"], result.iteration, time.perf_counter() - start)


def overfit(scenes: int = 16, seed: int = 0, train_config: TrainConfig = OVERFIT_TRAIN, log_every=0) -> RunResult:
    """Train on ``scenes`` synthetic 128x128 images and score the same images."""
    data = generate_dataset(seed=seed, n=scenes, config=SceneConfig(height=128, width=128))
    return train_and_evaluate(data, data, DESK_MODEL, train_config, LossWeights(), log_every=log_every)


ABLATION_TRAIN = TrainConfig(lr=1e-3, warmup_iters=100, epochs=90, batch_size=4, points=1024, seed=0)


def ablation_variants(base: LossWeights = LossWeights()) -> dict[str, LossWeights]:
    """Baseline without direction learning or box-aware weighting, then each one added."""
    plain = replace(base, direction=0.0, alpha=1.0)
    return {
        "baseline": plain,
        "direction": replace(plain, direction=base.direction),
        "box_aware": replace(plain, alpha=base.alpha),
    }


def ablation(
    train_scenes: int = 256,
    eval_scenes: int = 64,
    data_seed: int = 0,
    train_config: TrainConfig = ABLATION_TRAIN,
    seeds: tuple[int, ...] = (0,),
    log_every=0,
) -> dict[str, list[RunResult]]:
    """Train each variant on one split and score a disjoint held-out split.

    Data splits depend only on ``data_seed``; each variant is trained once per
    entry of ``seeds`` (initialization, shuffling and point sampling).
    """
    cfg = SceneConfig(height=128, width=128)
    train_set = generate_dataset(seed=data_seed, n=train_scenes, config=cfg)
    eval_set = generate_dataset(seed=data_seed + 10_000, n=eval_scenes, config=cfg)
    out = {}
    for name, weights in ablation_variants().items():
        out[name] = []
        for seed in seeds:
            log.info("ablation variant %s, seed %d", name, seed)
            tc = replace(train_config, seed=seed)
            out[name].append(train_and_evaluate(train_set, eval_set, DESK_MODEL, tc, weights, log_every=log_every))
    return out
