"""Training loop with the dual-mode schedule and the prediction memory."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .data import FrameIndex
from .io import write_json
from .matching import model_loss
from .model import MapModel, to_map_elements
from .queries import Mode
from .runtime import PredictionMemory, training_step_hook

log = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: MapModel
    memory: PredictionMemory
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    mode_counts: dict[str, int] = field(default_factory=dict)
    seconds: float = 0.0


def seed_everything(seed: int):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def lr_factor(step: int, total: int, warmup: int, cosine: bool) -> float:
    if warmup and step < warmup:
        return (step + 1) / warmup
    if not cosine or total <= warmup:
        return 1.0
    p = (step - warmup) / max(1, total - warmup)
    return 0.5 * (1.0 + math.cos(math.pi * min(1.0, p)))


def batch_raster(frames, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.stack([np.asarray(f.observation.grid) for f in frames])).to(dtype)


def train(cfg: ExperimentConfig, sequences, out_dir=None, dtype=torch.float32,
          step_callback: Callable | None = None, position_hook: Callable | None = None,
          max_steps: int | None = None, shuffle: bool = True) -> TrainResult:
    """Train a fresh model on ``sequences`` (lists of FrameSample).

    Checkpoints are written to ``out_dir/checkpoints`` after every epoch when
    ``out_dir`` is given. ``step_callback(step, loss, out, batch_ids)`` runs after
    every optimizer step.
    """
    seed_everything(cfg.seed)
    rs = np.random.default_rng(cfg.seed)
    model = MapModel(cfg).to(dtype)
    index = FrameIndex(sequences)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
    B = cfg.optim.batch_size
    steps_per_epoch = math.ceil(len(index) / B)
    total_steps = steps_per_epoch * cfg.optim.epochs
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: lr_factor(s, total_steps, cfg.optim.warmup_steps, cfg.optim.cosine))
    memory = PredictionMemory(cfg.querygen.k_prev, cfg.runtime.score_threshold, cfg.perception_range)
    result = TrainResult(model, memory, mode_counts={m.value: 0 for m in Mode})
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        save_checkpoint(model, cfg, out_dir / "checkpoints" / "epoch_000.pt", epoch=0)
    t0 = time.time()
    step = 0
    model.train()
    for epoch in range(cfg.optim.epochs):
        order = rs.permutation(len(index)) if shuffle else np.arange(len(index))
        losses = []
        for start in range(0, len(order), B):
            ids = [index.ids[i] for i in order[start:start + B]]
            frames = [index[i] for i in ids]
            modes, prevs = training_step_hook(memory, ids, [f.ego_pose for f in frames], rs, cfg.querygen)
            for m in modes:
                result.mode_counts[m.value] += 1
            out = model(batch_raster(frames, dtype), modes, prevs, position_hook=position_hook)
            # matching cannot run on non-finite costs, so test the outputs first
            finite = all(bool(torch.isfinite(lo.class_logits).all() and torch.isfinite(lo.locations).all())
                         for lo in out.layers)
            loss = (model_loss(out, [f.gt_elements for f in frames], cfg.perception_range,
                               cfg.loss, cfg.querygen.num_points)[0]
                    if finite else torch.tensor(float("nan")))
            if not torch.isfinite(loss):
                _dump_bad_batch(out_dir, epoch, step, ids, modes, prevs, loss)
                raise NonFiniteLoss(f"non-finite loss {float(loss)} at epoch {epoch} step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.optim.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.optim.grad_clip)
            opt.step()
            sched.step()
            last = out.layers[-1]
            for b, (sid, f) in enumerate(zip(ids, frames)):
                n = out.primary_count(b)
                preds = to_map_elements(last.class_logits[b, :n], last.locations[b, :n], 0.0)
                memory.store(sid, preds, f.ego_pose)
            lv = float(loss.detach())
            losses.append(lv)
            result.step_losses.append(lv)
            if step_callback is not None:
                step_callback(step, loss.detach(), out, ids)
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        result.epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
        log.info("epoch %d loss %.4f (%.0fs)", epoch + 1, result.epoch_losses[-1], time.time() - t0)
        if out_dir is not None:
            save_checkpoint(model, cfg, out_dir / "checkpoints" / f"epoch_{epoch + 1:03d}.pt", epoch=epoch + 1)
        if max_steps is not None and step >= max_steps:
            break
    result.seconds = time.time() - t0
    return result


def _dump_bad_batch(out_dir, epoch, step, ids, modes, prevs, loss):
    if out_dir is None:
        return
    write_json(Path(out_dir) / "nan_dump.json", {
        "epoch": epoch, "step": step, "loss": repr(float(loss)),
        "sample_ids": [list(i) for i in ids],
        "modes": [m.value for m in modes],
        "prev_counts": [None if p is None else len(p) for p in prevs],
    })
