"""Prediction memory and the streaming / training-time temporal loop."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Hashable

import numpy as np
import torch

from .geometry import MapElement, PerceptionRange, Pose2, transform_points
from .model import MapModel, to_map_elements
from .queries import Mode, select_mode, top_k_select

log = logging.getLogger(__name__)


@dataclass
class MemoryEntry:
    elements: list[MapElement]
    pose: Pose2
    step: int


class PredictionMemory:
    """Per-sample store of the top-k previous predictions and their ego pose.

    Reads may happen from any thread; writes take a lock.
    """

    def __init__(self, k_prev: int, score_threshold: float = 0.0,
                 perception_range: PerceptionRange | None = None):
        self.k_prev = k_prev
        self.score_threshold = score_threshold
        self.range = perception_range or PerceptionRange()
        self.entries: dict[Hashable, MemoryEntry] = {}
        self._lock = threading.Lock()
        self.reads = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, sample_id) -> bool:
        return sample_id in self.entries

    def store(self, sample_id, preds: list[MapElement], pose: Pose2):
        kept = [p for p in preds if p.confidence > self.score_threshold] if self.score_threshold > 0 else list(preds)
        kept = top_k_select(kept, self.k_prev)
        with self._lock:
            old = self.entries.get(sample_id)
            step = old.step + 1 if old is not None else 1
            self.entries[sample_id] = MemoryEntry(kept, pose, step)

    def fetch_previous(self, prev_sample_id, current_pose: Pose2) -> list[MapElement] | None:
        """Stored predictions re-expressed in the current ego frame, or None.

        Elements with every point outside the perception range are dropped;
        the rest are kept unclipped.
        """
        self.reads += 1
        entry = self.entries.get(prev_sample_id)
        if entry is None:
            return None
        out = []
        for e in entry.elements:
            pts = transform_points(e.points, entry.pose, current_pose)
            if not self.range.contains(pts).any():
                continue
            out.append(e.with_points(pts))
        return out

    def snapshot(self) -> dict:
        with self._lock:
            return dict(self.entries)

    def __getstate__(self):
        d = self.__dict__.copy()
        del d["_lock"]
        return d

    def __setstate__(self, d):
        self.__dict__.update(d)
        self._lock = threading.Lock()


@dataclass
class StreamState:
    sequence_id: str
    last_pose: Pose2 | None = None
    last_predictions: list[MapElement] | None = None
    frame_count: int = 0


@dataclass
class StreamResult:
    sequence_id: str
    outputs: list[list[MapElement]]
    modes: list[Mode]
    memory_reads: list[bool]
    warnings: list[dict] = field(default_factory=list)
    memory: PredictionMemory | None = None


def frame_tensor(frame, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.asarray(frame.observation.grid), dtype=dtype)[None]


@torch.no_grad()
def run_stream(model: MapModel, frames, k_prev: int | None = None, score_threshold: float = 0.4,
               output_threshold: float = 0.0, mode_override: Mode | None = None,
               max_pose_jump: float | None = 25.0) -> StreamResult:
    """Stream a sequence frame by frame.

    Frame 0 runs single-frame; later frames run temporal with the previous
    frame's stored predictions unless ``mode_override`` forces a mode.
    ``output_threshold`` filters the returned elements, ``score_threshold`` the
    stored ones.
    """
    was_training = model.training
    model.eval()
    k = model.cfg.querygen.k_prev if k_prev is None else k_prev
    mem = PredictionMemory(k, score_threshold, model.range)
    seq_id = getattr(frames[0], "sequence_id", "") if frames else ""
    state = StreamState(seq_id)
    result = StreamResult(seq_id, [], [], [], memory=mem)
    for t, frame in enumerate(frames):
        first = t == 0
        read = False
        prev = None
        jump_ok = True
        if state.last_pose is not None and max_pose_jump is not None:
            d = float(np.hypot(frame.ego_pose.x - state.last_pose.x, frame.ego_pose.y - state.last_pose.y))
            if d > max_pose_jump:
                jump_ok = False
                result.warnings.append({"frame_index": t, "kind": "pose_discontinuity", "distance": d})
                log.warning("pose jump of %.1f m at frame %d, falling back to single-frame", d, t)
        mode = mode_override
        if mode is None:
            has_prev = (not first) and jump_ok and (t - 1) in mem
            mode = select_mode(False, first, has_prev, None, model.cfg.querygen)
        if mode is Mode.TEMPORAL and not first:
            prev = mem.fetch_previous(t - 1, frame.ego_pose)
            read = True
            if prev is None:
                mode, prev = Mode.SINGLE_FRAME, None
        out = model(frame_tensor(frame, model.bank.q_con_pt.dtype), [mode],
                    [prev if mode is Mode.TEMPORAL else None], num_groups=1)
        last = out.layers[-1]
        n = out.primary_count(0)
        elements = to_map_elements(last.class_logits[0, :n], last.locations[0, :n], 0.0)
        mem.store(t, elements, frame.ego_pose)
        result.outputs.append([e for e in elements if e.confidence > output_threshold])
        result.modes.append(mode)
        result.memory_reads.append(read)
        state.last_pose, state.last_predictions = frame.ego_pose, elements
        state.frame_count += 1
    model.train(was_training)
    return result


def prev_sample_id(sample_id):
    seq, idx = sample_id
    return (seq, idx - 1) if idx > 0 else None


def training_step_hook(mem: PredictionMemory, batch_ids, poses, rng, cfg):
    """Per-sample (mode, previous predictions) for a training batch.

    Samples without a stored predecessor run single-frame whatever the draw.
    """
    modes, prevs = [], []
    for sid, pose in zip(batch_ids, poses):
        pid = prev_sample_id(sid)
        prev = mem.fetch_previous(pid, pose) if pid is not None else None
        mode = select_mode(True, pid is None, prev is not None, rng, cfg)
        modes.append(mode)
        prevs.append(prev if mode is Mode.TEMPORAL else None)
    return modes, prevs
