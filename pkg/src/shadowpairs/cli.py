"""Command-line entry point: ``shadowpairs {gen-data,train,eval,infer,render}``.

Verbosity follows ``SHADOWPAIRS_LOG_LEVEL`` (default WARNING).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .config import ConfigError, RunConfig
from .data import AnnotationError, Detection, load_annotations, load_detections, read_image, save_annotations, save_detections, write_image
from .evaluation import evaluate, ground_truth_detections, postprocess, predict
from .features import pad_to_multiple
from .model import PairDetector
from .render import render_overlay
from .synthetic import SceneConfig, generate_dataset
from .training import Trainer, TrainingDiverged, jsonl_logger

log = logging.getLogger("shadowpairs")
LOG_ENV = "SHADOWPAIRS_LOG_LEVEL"


class UsageError(ValueError):
    pass


def _size(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)x(\d+)", text)
    if not m or int(m[1]) < 1 or int(m[2]) < 1:
        raise UsageError(f"invalid size {text!r}; expected HxW with positive integers, e.g. 128x128")
    return int(m[1]), int(m[2])


def _pairs(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)\.\.(\d+)", text)
    if not m or int(m[1]) < 1 or int(m[2]) < int(m[1]):
        raise UsageError(f"invalid pair range {text!r}; expected a..b with 1 <= a <= b")
    return int(m[1]), int(m[2])


# ----------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    h, w = _size(args.size)
    cfg = SceneConfig(height=h, width=w, pair_range=_pairs(args.pairs))
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create output directory {out}: {e}") from e
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory is not writable: {out}")
    samples = generate_dataset(seed=args.seed, n=args.n, config=cfg)
    path = save_annotations(samples, out)
    pairs = sum(len(s.instances) for s in samples)
    print(f"wrote {len(samples)} images with {pairs} shadow-object pairs to {path}")
    return 0


def _load_dataset(path, what: str):
    if path is None:
        raise UsageError(f"no {what} dataset configured")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} dataset not found: {p}")
    return load_annotations(p)


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg = RunConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    data = _load_dataset(cfg.data.train, "training")
    out = Path(cfg.data.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    trainer = Trainer(data, cfg.model, cfg.train_config, cfg.loss)
    log_path = out / "train_log.jsonl"
    if args.resume:
        ckpt_io.resume(trainer, _checkpoint_for(args.resume, cfg))
        log.info("resumed at epoch %d, iteration %d", trainer.epoch, trainer.iteration)
    else:
        log_path.write_text("")
    snapshot = cfg.to_dict()

    def checkpointer(event, tr):
        every = cfg.data.checkpoint_every
        if event == "epoch_end" and every and tr.epoch % every == 0 and tr.epoch < tr.config.epochs:
            ckpt_io.save(ckpt_io.from_trainer(tr, snapshot), out / f"checkpoint_epoch{tr.epoch:04d}.ckpt")

    result = trainer.run((jsonl_logger(log_path), checkpointer))
    final = out / "final.ckpt"
    ckpt_io.save(ckpt_io.from_trainer(trainer, snapshot), final)
    last = result.history[-1]["total"] if result.history else float("nan")
    print(f"trained {result.epoch} epochs ({result.iteration} iterations), final loss {last:.6f}; checkpoint {final}")
    return 0


def _checkpoint_for(path, cfg: RunConfig):
    ckpt = ckpt_io.load(path)
    saved = ckpt.config.get("model", {}).get("num_layers")
    if saved is not None and saved != cfg.model.num_layers:
        raise UsageError(f"decoder depth mismatch: checkpoint {path} was trained with {saved} layers, config asks for {cfg.model.num_layers}")
    return ckpt


def _model_from(args) -> tuple[PairDetector, RunConfig]:
    ckpt = ckpt_io.load(args.checkpoint)
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
        _checkpoint_for(args.checkpoint, cfg)
    else:
        cfg = RunConfig.from_dict(ckpt.config)
    model = PairDetector(cfg.model)
    ckpt_io.restore(ckpt, model)
    model.eval()
    return model, cfg


def cmd_eval(args) -> int:
    samples = _load_dataset(args.data, "evaluation")
    if args.oracle == "gt":
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        dets = ground_truth_detections(samples)
    elif args.oracle == "empty":
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        dets = [[] for _ in samples]
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint unless --oracle is given")
        model, cfg = _model_from(args)
        dets = predict(model, samples, cfg.eval)
    report = evaluate(dets, samples, cfg.eval)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(json.dumps(report.to_dict(), indent=2))
    print(report.row())
    return 0


def _infer_one(model: PairDetector, cfg: RunConfig, image: np.ndarray) -> list[Detection]:
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.ascontiguousarray(image.transpose(2, 0, 1)), dtype=dtype)
    x, (h, w) = pad_to_multiple(x)
    with torch.no_grad():
        out = model(x[None])
    return postprocess(out.predictions[-1], out.grid, (h, w), cfg.eval, out.offsets, tuple(x.shape[-2:]))


def _read_input(path) -> np.ndarray:
    try:
        return read_image(path)
    except FileNotFoundError:
        raise
    except Exception as e:  # Pillow raises several types for undecodable files
        raise UsageError(f"cannot read image {path}: {e}") from e


def cmd_infer(args) -> int:
    image = _read_input(args.image)
    model, cfg = _model_from(args)
    dets = _infer_one(model, cfg, image)
    record = {"id": 0, "file_name": Path(args.image).name, "height": image.shape[0], "width": image.shape[1]}
    save_detections(args.out, [record], [dets])
    print(f"{len(dets)} detections written to {args.out}")
    if args.render:
        write_image(args.render, render_overlay(image, dets) / 255.0)
    return 0


def cmd_render(args) -> int:
    image = _read_input(args.image)
    if args.detections:
        _, per_image = load_detections(args.detections)
        dets = per_image[0] if per_image else []
    elif args.checkpoint:
        model, cfg = _model_from(args)
        dets = _infer_one(model, cfg, image)
    else:
        raise UsageError("render needs --checkpoint or --detections")
    write_image(args.out, render_overlay(image, dets) / 255.0)
    print(f"overlay with {len(dets)} pairs written to {args.out}")
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shadowpairs", description="Paired shadow/object instance detection.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic paired dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", default="128x128", help="HxW")
    g.add_argument("--pairs", default="1..4", help="a..b pairs per image")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a YAML run config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="compute SOAP / association AP / instance AP")
    e.add_argument("--checkpoint")
    e.add_argument("--config", help="run config; must agree with the checkpoint")
    e.add_argument("--data", required=True, help="annotation JSON")
    e.add_argument("--report", help="output JSON path")
    e.add_argument("--oracle", choices=("gt", "empty"), help="score ground truth or nothing instead of a model")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="detect pairs in one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--config")
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True, help="detections JSON")
    i.add_argument("--render", help="optional overlay PNG")
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=cmd_infer)

    r = sub.add_parser("render", help="draw detections over an image")
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--checkpoint")
    r.add_argument("--config")
    r.add_argument("--detections", help="detections JSON instead of a checkpoint")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get(LOG_ENV, "WARNING").upper(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is not None:
        torch.manual_seed(args.seed)
    try:
        return args.func(args)
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 3
    except (UsageError, ConfigError, ckpt_io.CheckpointError, AnnotationError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
