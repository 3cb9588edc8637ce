"""Portable checkpoints: a zip of ``manifest.json`` plus raw little-endian float32 blocks.

Entries carry a fixed timestamp and are stored uncompressed in a fixed order,
so saving a loaded checkpoint reproduces the original bytes.
"""
from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

FORMAT = "shadowpairs-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    parameters: dict[str, torch.Tensor]
    optimizer: dict | None = None  # {"param_groups": [...], "state": {name: {key: tensor | value}}}
    epoch: int = 0
    iteration: int = 0
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    version: int = VERSION


# ------------------------------------------------------------------ capture


def capture(model: torch.nn.Module, optimizer: torch.optim.Optimizer | None = None, epoch=0, iteration=0, config=None, extra=None) -> Checkpoint:
    params = {k: v.detach().clone() for k, v in model.state_dict().items()}
    opt = None
    if optimizer is not None:
        names = [n for n, _ in model.named_parameters()]
        sd = optimizer.state_dict()
        flat = [i for g in sd["param_groups"] for i in g["params"]]
        if len(flat) != len(names):
            raise CheckpointError("optimizer does not cover exactly the model parameters")
        by_index = dict(zip(flat, names))
        groups = []
        for g in sd["param_groups"]:
            g = {k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()}
            g["params"] = [by_index[i] for i in g["params"]]
            groups.append(g)
        state = {by_index[i]: dict(s) for i, s in sd["state"].items()}
        opt = {"param_groups": groups, "state": state}
    return Checkpoint(params, opt, int(epoch), int(iteration), dict(config or {}), dict(extra or {}))


def restore(ckpt: Checkpoint, model: torch.nn.Module, optimizer: torch.optim.Optimizer | None = None) -> None:
    """Load parameters (and optimizer state) in place, checking names and shapes."""
    current = model.state_dict()
    missing = sorted(set(current) - set(ckpt.parameters))
    unexpected = sorted(set(ckpt.parameters) - set(current))
    if missing or unexpected:
        raise CheckpointError(_mismatch_message(ckpt, current, missing, unexpected))
    for name, t in ckpt.parameters.items():
        if tuple(t.shape) != tuple(current[name].shape):
            raise CheckpointError(f"shape mismatch for '{name}': checkpoint {tuple(t.shape)}, model {tuple(current[name].shape)}")
    model.load_state_dict({k: v.to(current[k].dtype) for k, v in ckpt.parameters.items()})
    if optimizer is None:
        return
    if ckpt.optimizer is None:
        raise CheckpointError("checkpoint holds no optimizer state")
    names = [n for n, _ in model.named_parameters()]
    index = {n: i for i, n in enumerate(names)}
    dtypes = {n: p.dtype for n, p in model.named_parameters()}
    groups = []
    for g in ckpt.optimizer["param_groups"]:
        g = dict(g)
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
        g["params"] = [index[n] for n in g["params"]]
        groups.append(g)
    state = {}
    for n, s in ckpt.optimizer["state"].items():
        state[index[n]] = {k: _state_value(v, dtypes[n]) for k, v in s.items()}
    optimizer.load_state_dict({"state": state, "param_groups": groups})


def _state_value(v, dtype):
    # moment buffers follow the parameter dtype; scalar step counters keep theirs
    if not isinstance(v, torch.Tensor):
        return v
    return v.to(dtype) if v.dim() else v.clone()


def _mismatch_message(ckpt, current, missing, unexpected) -> str:
    layers = lambda keys: len({k.split(".")[1] for k in keys if k.startswith("layers.")})
    have, want = layers(ckpt.parameters), layers(current)
    if have != want:
        return f"decoder depth mismatch: checkpoint has {have} association layers, config asks for {want}"
    first = (missing or unexpected)[0]
    return f"parameter names differ from the model (first: '{first}')"


# --------------------------------------------------------------------- disk


def _info(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def _block(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().to(torch.float32).numpy(), dtype="<f4").tobytes()


def save(ckpt: Checkpoint, path) -> None:
    blobs: list[tuple[str, bytes]] = []

    def put(t: torch.Tensor) -> dict:
        name = f"blocks/{len(blobs):05d}.f32"
        blobs.append((name, _block(t)))
        return {"block": name, "shape": list(t.shape)}

    params = {k: put(ckpt.parameters[k]) for k in sorted(ckpt.parameters)}
    opt = None
    if ckpt.optimizer is not None:
        state = {}
        for n in sorted(ckpt.optimizer["state"]):
            entry = {}
            for k in sorted(ckpt.optimizer["state"][n]):
                v = ckpt.optimizer["state"][n][k]
                entry[k] = {"tensor": put(v)} if isinstance(v, torch.Tensor) else {"value": v}
            state[n] = entry
        opt = {"param_groups": ckpt.optimizer["param_groups"], "state": state}
    manifest = {
        "format": FORMAT,
        "version": ckpt.version,
        "epoch": ckpt.epoch,
        "iteration": ckpt.iteration,
        "config": ckpt.config,
        "extra": ckpt.extra,
        "parameters": params,
        "optimizer": opt,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_info("manifest.json"), json.dumps(manifest, sort_keys=True, indent=1))
        for name, data in blobs:
            zf.writestr(_info(name), data)


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format") != FORMAT:
                raise CheckpointError(f"{path}: not a {FORMAT} archive")
            if manifest["version"] > VERSION:
                raise CheckpointError(f"{path}: format version {manifest['version']} is newer than supported {VERSION}")

            def get(ref) -> torch.Tensor:
                arr = np.frombuffer(zf.read(ref["block"]), dtype="<f4").astype(np.float32)
                return torch.from_numpy(arr.reshape(ref["shape"]).copy())

            params = {k: get(v) for k, v in manifest["parameters"].items()}
            opt = None
            if manifest["optimizer"] is not None:
                state = {
                    n: {k: get(v["tensor"]) if "tensor" in v else v["value"] for k, v in entry.items()}
                    for n, entry in manifest["optimizer"]["state"].items()
                }
                opt = {"param_groups": manifest["optimizer"]["param_groups"], "state": state}
    except (zipfile.BadZipFile, KeyError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from e
    return Checkpoint(params, opt, manifest["epoch"], manifest["iteration"], manifest["config"], manifest["extra"], manifest["version"])


# ------------------------------------------------------------------ trainer


def from_trainer(trainer, config: dict | None = None) -> Checkpoint:
    return capture(trainer.model, trainer.optimizer, trainer.epoch, trainer.iteration, config)


def resume(trainer, ckpt: Checkpoint) -> None:
    """Put ``trainer`` in the state it had when ``ckpt`` was taken."""
    restore(ckpt, trainer.model, trainer.optimizer)
    if ckpt.iteration != ckpt.epoch * trainer.iters_per_epoch:
        raise CheckpointError("checkpoint was not taken at an epoch boundary of this dataset")
    trainer.epoch = ckpt.epoch
    trainer.iteration = ckpt.iteration
