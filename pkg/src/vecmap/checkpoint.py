"""Checkpoint files: parameter tensors, a tensor-name manifest and the config hash.

Layout (a ``torch.save`` dict)::

    format_version  int
    model_hash      hash of the architecture-defining config sections
    config          full ExperimentConfig as a plain dict
    manifest        [{"name", "shape", "dtype"}] for every tensor in state_dict
    state_dict      name -> tensor
    epoch           int
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import torch

from .config import ExperimentConfig

CHECKPOINT_VERSION = 1


class CheckpointMismatch(RuntimeError):
    pass


def tensor_manifest(state_dict) -> list[dict]:
    return [{"name": k, "shape": list(v.shape), "dtype": str(v.dtype).replace("torch.", "")}
            for k, v in state_dict.items()]


def save_checkpoint(model, cfg: ExperimentConfig, path, epoch: int = 0, extra: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sd = {k: v.detach().clone() for k, v in model.state_dict().items()}
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_hash": cfg.model_hash(),
        "config": cfg.to_dict(),
        "manifest": tensor_manifest(sd),
        "state_dict": sd,
        "epoch": epoch,
        "extra": extra or {},
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, cfg: ExperimentConfig | None = None, strict_hash: bool = True):
    """Return (model, config, payload). Refuses on an architecture hash mismatch."""
    from .model import MapModel

    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    stored = ExperimentConfig.from_dict(payload["config"])
    if cfg is None:
        cfg = stored
    if strict_hash and cfg.model_hash() != payload["model_hash"]:
        raise CheckpointMismatch(
            f"config hash {cfg.model_hash()} does not match checkpoint hash {payload['model_hash']}")
    names = [m["name"] for m in payload["manifest"]]
    if names != list(payload["state_dict"]):
        raise CheckpointMismatch(f"{path}: manifest does not match stored tensors")
    model = MapModel(cfg)
    dtype = next(iter(payload["state_dict"].values())).dtype
    model = model.to(dtype)
    model.load_state_dict(payload["state_dict"])
    return model, cfg, payload
