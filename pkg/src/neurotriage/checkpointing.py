"""Checkpoint container and its on-disk format.

Files carry a magic header and format version; the payload stores every tensor
as a numpy array so that save -> load -> save is byte-identical.
"""

from __future__ import annotations

import io
import pickle
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointMismatch, CorruptFile, VersionMismatch
from . import networks

MAGIC = b"NTCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str                       # detection | hemorrhage_seg | parcellation | fused
    config: dict                    # config snapshot (net + training settings)
    model_state: dict               # parameter/buffer name -> np.ndarray
    optimizer_state: dict | None = None
    epoch: int = 0
    rng_state: dict | None = None
    history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def state_to_numpy(module: torch.nn.Module) -> dict:
    return {name: tensor.detach().cpu().numpy().copy()
            for name, tensor in module.state_dict().items()}


def load_numpy_state(module: torch.nn.Module, state: dict) -> None:
    tensors = {name: torch.from_numpy(np.asarray(arr)) for name, arr in state.items()}
    module.load_state_dict(tensors)


def _to_numpy_tree(obj):
    if isinstance(obj, torch.Tensor):
        return {"__tensor__": obj.detach().cpu().numpy().copy()}
    if isinstance(obj, dict):
        return {k: _to_numpy_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        seq = [_to_numpy_tree(v) for v in obj]
        return seq if isinstance(obj, list) else tuple(seq)
    return obj


def _from_numpy_tree(obj):
    if isinstance(obj, dict):
        if set(obj.keys()) == {"__tensor__"}:
            return torch.from_numpy(np.asarray(obj["__tensor__"]))
        return {k: _from_numpy_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        seq = [_from_numpy_tree(v) for v in obj]
        return seq if isinstance(obj, list) else tuple(seq)
    return obj


def optimizer_state_to_numpy(optimizer: torch.optim.Optimizer) -> dict:
    return _to_numpy_tree(optimizer.state_dict())


def load_optimizer_state(optimizer: torch.optim.Optimizer, state: dict) -> None:
    optimizer.load_state_dict(_from_numpy_tree(state))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    payload = {
        "kind": ckpt.kind,
        "config": ckpt.config,
        "model_state": ckpt.model_state,
        "optimizer_state": ckpt.optimizer_state,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
        "extra": ckpt.extra,
    }
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(FORMAT_VERSION.to_bytes(2, "little"))
    pickle.dump(payload, buf, protocol=4)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 2 or blob[:len(MAGIC)] != MAGIC:
        raise CorruptFile(f"{path}: not a checkpoint file")
    version = int.from_bytes(blob[len(MAGIC):len(MAGIC) + 2], "little")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    try:
        payload = pickle.loads(blob[len(MAGIC) + 2:])
    except Exception as exc:
        raise CorruptFile(f"{path}: payload does not unpickle ({exc})") from exc
    try:
        return Checkpoint(**payload)
    except TypeError as exc:
        raise CorruptFile(f"{path}: malformed payload ({exc})") from exc


def net_config_from_dict(kind: str, cfg: dict):
    if kind == "detection":
        return networks.DetectionNetConfig(**{
            **cfg, "layer_distribution": tuple(cfg["layer_distribution"]),
            "downsample_strides": (tuple(cfg["downsample_strides"])
                                   if cfg.get("downsample_strides") else None),
        })
    if kind == "hemorrhage_seg":
        return networks.HemorrhageSegConfig(**cfg)
    if kind == "parcellation":
        return networks.ParcellationConfig(**{
            **cfg, "level_channels": tuple(cfg["level_channels"]),
            "head_classes": tuple(cfg["head_classes"]),
        })
    raise CheckpointMismatch(f"unknown network kind {kind!r}")


def build_net_from_checkpoint(ckpt: Checkpoint) -> torch.nn.Module:
    """Rebuild a trunk network and load its weights."""
    net_cfg = net_config_from_dict(ckpt.kind, ckpt.config["net"])
    if ckpt.kind == "detection":
        net = networks.DetectionNet(net_cfg)
    elif ckpt.kind == "hemorrhage_seg":
        net = networks.HemorrhageSegNet(net_cfg)
    else:
        net = networks.ParcellationNet(net_cfg)
    load_numpy_state(net, ckpt.model_state)
    return net


def net_config_to_dict(cfg) -> dict:
    return asdict(cfg)


def resolve_checkpoint(source) -> Checkpoint:
    """Accept a Checkpoint or a path to one."""
    if isinstance(source, Checkpoint):
        return source
    return load_checkpoint(source)
