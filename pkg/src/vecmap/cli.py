"""Command line entry point: generate, train, eval, stream, render, ablate.

Every command prints a final JSON line with its metrics and exits 0 only when
all artifacts it was asked for exist on disk.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from . import __version__
from .ablation import AXES, DEFAULT_GRIDS, run_ablation
from .checkpoint import CheckpointMismatch, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, merge, save_config
from .data import generate_dataset, load_split
from .experiments import RunCache
from .io import (
    read_predictions,
    read_sequence,
    write_json,
    write_memory_snapshot,
    write_predictions,
    prediction_records,
)
from .pipeline import evaluate_model, stream_sequences
from .queries import Mode
from .render import parse_frame_range, render_files
from .synth import ConfigError
from .train import NonFiniteLoss, train

log = logging.getLogger("vecmap")

EXIT_OK, EXIT_MISSING, EXIT_USAGE, EXIT_MISMATCH, EXIT_FAILED = 0, 1, 2, 3, 4


class UsageError(RuntimeError):
    pass


@dataclass
class RunManifest:
    command: str
    config_hash: str
    code_version: str
    seed: int
    output_dir: str = ""
    epoch_losses: list[float] = field(default_factory=list)
    report_paths: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)


def code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _parse_set(items) -> dict:
    """``a.b=1`` pairs into a nested dict; values are parsed as YAML scalars."""
    out: dict = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def resolve_config(args, base: dict | None = None) -> ExperimentConfig:
    """Config file (or ``base``) plus ``--set``, ``--seed`` and ``--output-dir``."""
    over = _parse_set(args.set)
    if args.seed is not None:
        over["seed"] = args.seed
    if args.output_dir is not None:
        over["output_dir"] = str(args.output_dir)
    if base is not None and not args.config:
        return ExperimentConfig.from_dict(merge(base, over)).validate()
    return load_config(args.config, over)


def _out(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir)


def _data_dir(args, cfg) -> Path:
    d = Path(args.data) if getattr(args, "data", None) else _out(cfg) / "data"
    if not (d / "dataset.json").exists():
        raise UsageError(f"no dataset at {d} (run `generate` first or pass --data)")
    return d


def _modes(name: str) -> list[Mode]:
    return [Mode.SINGLE_FRAME, Mode.TEMPORAL] if name == "both" else [Mode(name)]


def _write_reports(out: Path, model, cfg, seqs, modes, k_prev, jobs, manifest: RunManifest,
                   predictions: bool = True) -> dict:
    metrics = {}
    for mode in modes:
        t0 = time.time()
        rep, streams = evaluate_model(model, seqs, cfg, mode, k_prev, jobs)
        path = out / "reports" / f"eval_{mode.value}.json"
        write_json(path, rep.to_dict())
        manifest.report_paths[mode.value] = str(path)
        manifest.artifacts.append(str(path))
        if predictions:
            for res in streams:
                p = out / "predictions" / mode.value / f"{res.sequence_id}.jsonl"
                write_predictions(p, prediction_records(res.sequence_id, res.outputs, res.modes))
                manifest.artifacts.append(str(p))
        manifest.timings[f"eval_{mode.value}"] = time.time() - t0
        metrics[f"mAP_{mode.value}"] = rep.map_score
        metrics[f"ap_category_{mode.value}"] = rep.ap_category
    return metrics


def cmd_generate(args, cfg: ExperimentConfig, manifest: RunManifest) -> dict:
    root = Path(args.data) if args.data else _out(cfg) / "data"
    meta = generate_dataset(cfg, root, args.jobs)
    manifest.artifacts.append(str(root / "dataset.json"))
    for split, names in meta["splits"].items():
        for n in names:
            manifest.artifacts += [str(root / split / f"{n}.jsonl"), str(root / split / f"{n}.npz")]
    return {"dataset": str(root), "num_train": len(meta["splits"]["train"]),
            "num_val": len(meta["splits"]["val"])}


def cmd_train(args, cfg: ExperimentConfig, manifest: RunManifest) -> dict:
    data = _data_dir(args, cfg)
    out = _out(cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    manifest.artifacts.append(str(out / "config.yaml"))
    t0 = time.time()
    res = train(cfg, load_split(data, "train"), out_dir=out)
    manifest.timings["train"] = time.time() - t0
    manifest.epoch_losses = res.epoch_losses
    final = out / "model.pt"
    save_checkpoint(res.model, cfg, final, epoch=cfg.optim.epochs,
                    extra={"epoch_losses": res.epoch_losses, "mode_counts": res.mode_counts})
    write_memory_snapshot(out / "train_memory.jsonl", res.memory)
    manifest.artifacts += [str(final), str(out / "train_memory.jsonl")]
    manifest.artifacts += [str(out / "checkpoints" / f"epoch_{e:03d}.pt")
                           for e in range(len(res.epoch_losses) + 1)]
    metrics = {"final_loss": res.epoch_losses[-1] if res.epoch_losses else None,
               "mode_counts": res.mode_counts, "checkpoint": str(final)}
    if not args.no_eval:
        metrics.update(_write_reports(out, res.model, cfg, load_split(data, "val"),
                                      _modes("both"), None, args.jobs, manifest, predictions=False))
    return metrics


def _load_model(args):
    """Without --config the checkpoint's own config is the base; either way the
    architecture hash must match the checkpoint or loading is refused."""
    import torch

    stored = torch.load(args.checkpoint, map_location="cpu", weights_only=False).get("config")
    cfg = resolve_config(args, stored)
    model, cfg, _ = load_checkpoint(args.checkpoint, cfg)
    return model, cfg


def cmd_eval(args, cfg: ExperimentConfig, manifest: RunManifest) -> dict:
    model, cfg = _load_model(args)
    manifest.config_hash, manifest.output_dir = cfg.config_hash(), cfg.output_dir
    data = _data_dir(args, cfg)
    return _write_reports(_out(cfg), model, cfg, load_split(data, args.split), _modes(args.mode),
                          args.k_prev, args.jobs, manifest)


def cmd_stream(args, cfg: ExperimentConfig, manifest: RunManifest) -> dict:
    model, mcfg = _load_model(args)
    manifest.config_hash, manifest.output_dir = mcfg.config_hash(), mcfg.output_dir
    out = _out(mcfg)
    mode = Mode(args.mode)
    counts = {}
    for path in args.sequence:
        frames = read_sequence(path)
        res = stream_sequences(model, [frames], mcfg, mode, args.k_prev)[0]
        p = out / "predictions" / f"{res.sequence_id}.jsonl"
        m = out / "memory" / f"{res.sequence_id}.jsonl"
        write_predictions(p, prediction_records(res.sequence_id, res.outputs, res.modes))
        write_memory_snapshot(m, res.memory)
        manifest.artifacts += [str(p), str(m)]
        counts[res.sequence_id] = {"frames": len(res.outputs),
                                   "temporal_frames": sum(md is Mode.TEMPORAL for md in res.modes),
                                   "warnings": len(res.warnings)}
    return {"sequences": counts}


def cmd_render(args, cfg: ExperimentConfig, manifest: RunManifest) -> dict:
    frames = read_sequence(args.sequence)
    preds = read_predictions(args.predictions) if args.predictions else None
    wanted = parse_frame_range(args.frames, len(frames))
    paths = render_files(preds, frames, _out(cfg) / "render", wanted, args.score_threshold,
                         cfg.perception_range)
    manifest.artifacts += [str(p) for p in paths]
    return {"rendered": len(paths), "requested": len(wanted)}


def cmd_ablate(args, cfg: ExperimentConfig, manifest: RunManifest) -> dict:
    grid = None
    if args.grid:
        raw = [g.strip() for g in args.grid.split(",")]
        grid = [yaml.safe_load(g) if args.axis in ("probability", "k") else g for g in raw]
    seeds = [int(s) for s in args.seeds.split(",")]
    cache = RunCache(Path(args.cache_dir) if args.cache_dir else _out(cfg) / "cache")
    t0 = time.time()
    table = run_ablation(args.axis, grid, cfg, seeds, cache, args.jobs)
    manifest.timings["ablate"] = time.time() - t0
    out = _out(cfg)
    jp, tp = out / f"ablation_{args.axis}.json", out / f"ablation_{args.axis}.txt"
    write_json(jp, table.to_dict())
    tp.parent.mkdir(parents=True, exist_ok=True)
    tp.write_text(table.to_text())
    manifest.artifacts += [str(jp), str(tp)]
    print(table.to_text(), file=sys.stderr)
    return {"axis": args.axis, "mAP_mean": {s["label"]: s["mAP_mean"] for s in table.summary()}}


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "stream": cmd_stream,
            "render": cmd_render, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--output-dir")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (1 = canonical path)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="config override, e.g. optim.epochs=2 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="vecmap", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write train/val sequences")
    g.add_argument("--data", help="dataset directory (default OUTPUT_DIR/data)")

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data")
    t.add_argument("--no-eval", action="store_true", help="skip the final validation reports")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--split", default="val", choices=["train", "val"])
    e.add_argument("--mode", default="both", choices=["single_frame", "temporal", "both"])
    e.add_argument("--k-prev", type=int)

    s = sub.add_parser("stream", parents=[common], help="stream sequence files through a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--sequence", required=True, nargs="+")
    s.add_argument("--mode", default="temporal", choices=["single_frame", "temporal"])
    s.add_argument("--k-prev", type=int)

    r = sub.add_parser("render", parents=[common], help="draw ground truth and prediction panels")
    r.add_argument("--sequence", required=True)
    r.add_argument("--predictions")
    r.add_argument("--frames", help="frame index or range a:b")
    r.add_argument("--score-threshold", type=float, default=0.4)

    a = sub.add_parser("ablate", parents=[common], help="run an ablation axis")
    a.add_argument("--axis", required=True, choices=AXES)
    a.add_argument("--grid", help="comma separated values (default: " +
                   "; ".join(f"{k}={','.join(map(str, v))}" for k, v in DEFAULT_GRIDS.items()) + ")")
    a.add_argument("--seeds", default="0")
    a.add_argument("--cache-dir")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    t0 = time.time()
    try:
        cfg = resolve_config(args)
        log.info("seed %d, config %s", cfg.seed, cfg.config_hash())
        manifest = RunManifest(args.command, cfg.config_hash(), code_version(), cfg.seed,
                               cfg.output_dir)
        metrics = COMMANDS[args.command](args, cfg, manifest)
    except CheckpointMismatch as exc:
        print(f"refusing to run: {exc}", file=sys.stderr)
        print(json.dumps({"command": args.command, "status": "checkpoint_mismatch"}))
        return EXIT_MISMATCH
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(json.dumps({"command": args.command, "status": "error"}))
        return EXIT_USAGE
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(json.dumps({"command": args.command, "status": "non_finite_loss"}))
        return EXIT_FAILED
    manifest.timings["total"] = time.time() - t0
    mpath = Path(manifest.output_dir) / f"manifest_{args.command}.json"
    write_json(mpath, asdict(manifest))
    missing = [a for a in manifest.artifacts if not Path(a).exists()]
    status = "ok" if not missing else "missing_artifacts"
    if missing:
        print(f"missing artifacts: {missing[:5]}", file=sys.stderr)
    print(json.dumps({"command": args.command, "status": status, "config_hash": manifest.config_hash,
                      "manifest": str(mpath), **metrics}, default=str))
    return EXIT_OK if not missing else EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
