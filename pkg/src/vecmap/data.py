"""Dataset generation (train/val split by sequence) and in-memory frame access."""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .io import FORMAT_VERSION, read_json, read_sequence, write_json, write_sequence
from .synth import FrameSample, SceneSpec, generate_sequence


def sequence_spec(cfg: ExperimentConfig, index: int) -> SceneSpec:
    """Per-sequence scene spec: base scene with seeded lane count and curvature."""
    rs = np.random.default_rng([cfg.seed, index, 7])
    base = cfg.scene
    lanes = int(rs.choice(cfg.data.lane_choices)) if cfg.data.lane_choices else base.num_lanes
    curvature = float(rs.uniform(0.0, base.curvature))
    return dataclasses.replace(base, seed=int(rs.integers(2**31 - 1)), num_lanes=lanes,
                               curvature=curvature)


def split_indices(cfg: ExperimentConfig) -> dict[str, list[int]]:
    n_tr, n_va = cfg.data.num_train, cfg.data.num_val
    return {"train": list(range(n_tr)), "val": list(range(n_tr, n_tr + n_va))}


def sequence_name(index: int) -> str:
    return f"seq{index:05d}"


def _generate_one(args):
    cfg, index, out_dir = args
    frames = generate_sequence(sequence_spec(cfg, index), sequence_name(index))
    if out_dir is not None:
        write_sequence(Path(out_dir) / f"{sequence_name(index)}.jsonl", frames)
        return None
    return frames


def generate_dataset(cfg: ExperimentConfig, root, jobs: int = 1) -> dict:
    """Write ``root/{train,val}/seqXXXXX.{jsonl,npz}`` and ``root/dataset.json``."""
    root = Path(root)
    splits = split_indices(cfg)
    for split, idx in splits.items():
        out = root / split
        out.mkdir(parents=True, exist_ok=True)
        tasks = [(cfg, i, out) for i in idx]
        if jobs > 1:
            with ProcessPoolExecutor(jobs) as ex:
                list(ex.map(_generate_one, tasks))
        else:
            for t in tasks:
                _generate_one(t)
    meta = {
        "format_version": FORMAT_VERSION,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "splits": {k: [sequence_name(i) for i in v] for k, v in splits.items()},
    }
    write_json(root / "dataset.json", meta)
    return meta


def generate_split_in_memory(cfg: ExperimentConfig, split: str) -> list[list[FrameSample]]:
    return [_generate_one((cfg, i, None)) for i in split_indices(cfg)[split]]


def load_split(root, split: str) -> list[list[FrameSample]]:
    root = Path(root)
    meta = read_json(root / "dataset.json")
    return [read_sequence(root / split / f"{name}.jsonl") for name in meta["splits"][split]]


@dataclass
class FrameIndex:
    """Flat view over sequences for shuffled training."""

    sequences: list[list[FrameSample]]

    def __post_init__(self):
        self.ids = [(s[0].sequence_id, f.frame_index) for s in self.sequences for f in s]
        self._lookup = {(s[0].sequence_id, f.frame_index): f for s in self.sequences for f in s}
        # compact rasters: occupancy / mask are 0-1 valued
        for f in self._lookup.values():
            g = f.observation.grid
            if g.dtype != np.uint8 and np.isfinite(g).all() and np.array_equal(g, g.astype(np.uint8)):
                f.observation.grid = g.astype(np.uint8)

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, sample_id) -> FrameSample:
        return self._lookup[sample_id]
