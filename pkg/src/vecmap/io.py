"""JSON-lines formats for sequences, predictions, memory snapshots and reports.

Every line carries ``format_version``. Sequence rasters live in a sibling
``.npz`` (one array per frame, key ``frame_XXXX``) referenced from each line.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .geometry import MapElement, PerceptionRange, Pose2
from .synth import FrameSample, RasterBEV

FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def _check_version(rec: dict, path):
    v = rec.get("format_version")
    if v is None:
        raise FormatError(f"{path}: missing format_version")
    if v != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {v}")


def atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_jsonl(path, records):
    atomic_write_text(path, "".join(json.dumps(r) + "\n" for r in records))


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_sequence(path, frames: list[FrameSample], sequence_id: str | None = None):
    """Write ``<path>`` (.jsonl) plus ``<path stem>.npz`` with the rasters."""
    path = Path(path)
    blob = path.with_suffix(".npz")
    sid = sequence_id or (frames[0].sequence_id if frames else path.stem)
    arrays = {f"frame_{f.frame_index:04d}": f.observation.grid for f in frames}
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(blob, **arrays)
    records = []
    for f in frames:
        records.append({
            "format_version": FORMAT_VERSION,
            "sequence_id": sid,
            "frame_index": f.frame_index,
            "pose": f.ego_pose.to_dict(),
            "elements": [e.to_dict() for e in f.gt_elements],
            "raster": {"file": blob.name, "key": f"frame_{f.frame_index:04d}",
                       "cell_size": f.observation.cell_size, "shape": list(f.observation.grid.shape)},
        })
    write_jsonl(path, records)


def read_sequence(path) -> list[FrameSample]:
    path = Path(path)
    records = read_jsonl(path)
    blobs = {}
    frames = []
    for rec in records:
        _check_version(rec, path)
        r = rec["raster"]
        if r["file"] not in blobs:
            blobs[r["file"]] = np.load(path.parent / r["file"])
        grid = blobs[r["file"]][r["key"]]
        if list(grid.shape) != r["shape"]:
            raise FormatError(f"{path}: raster shape mismatch for frame {rec['frame_index']}")
        frames.append(FrameSample(
            rec["frame_index"], Pose2.from_dict(rec["pose"]),
            [MapElement.from_dict(e) for e in rec["elements"]],
            RasterBEV(r["cell_size"], grid), rec["sequence_id"],
        ))
    return frames


def prediction_records(sequence_id: str, outputs, modes) -> list[dict]:
    return [
        {"format_version": FORMAT_VERSION, "sequence_id": sequence_id, "frame_index": t,
         "mode": getattr(m, "value", m), "elements": [e.to_dict() for e in els]}
        for t, (els, m) in enumerate(zip(outputs, modes))
    ]


def write_predictions(path, records: list[dict]):
    write_jsonl(path, records)


def read_predictions(path) -> list[dict]:
    out = []
    for rec in read_jsonl(path):
        _check_version(rec, path)
        rec = dict(rec)
        rec["elements"] = [MapElement.from_dict(e) for e in rec["elements"]]
        out.append(rec)
    return out


def write_memory_snapshot(path, memory):
    records = []
    for sid, entry in memory.snapshot().items():
        records.append({
            "format_version": FORMAT_VERSION,
            "sample_id": list(sid) if isinstance(sid, tuple) else sid,
            "pose": entry.pose.to_dict(),
            "step": entry.step,
            "elements": [e.to_dict() for e in entry.elements],
        })
    write_jsonl(path, records)


def read_memory_snapshot(path, k_prev: int, score_threshold: float = 0.0,
                         perception_range: PerceptionRange | None = None):
    from .runtime import MemoryEntry, PredictionMemory

    mem = PredictionMemory(k_prev, score_threshold, perception_range)
    for rec in read_jsonl(path):
        _check_version(rec, path)
        sid = tuple(rec["sample_id"]) if isinstance(rec["sample_id"], list) else rec["sample_id"]
        mem.entries[sid] = MemoryEntry([MapElement.from_dict(e) for e in rec["elements"]],
                                       Pose2.from_dict(rec["pose"]), rec["step"])
    return mem


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2) + "\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
