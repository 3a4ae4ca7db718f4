"""Cached train/eval runs keyed by config hash, shared by the CLI and ablations."""

from __future__ import annotations

import logging
import time
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import generate_split_in_memory
from .evaluation import EvalReport
from .io import read_json, write_json
from .pipeline import evaluate_model
from .queries import Mode
from .train import train

log = logging.getLogger(__name__)


class RunCache:
    """``root/<config_hash>/`` holds ``model.pt``, ``train.json`` and eval reports."""

    def __init__(self, root):
        self.root = Path(root)
        self._splits: dict[tuple[str, str], list] = {}

    def run_dir(self, cfg: ExperimentConfig) -> Path:
        return self.root / cfg.config_hash()

    def split(self, cfg: ExperimentConfig, name: str):
        # scene + data sections fully determine the generated sequences
        d = cfg.to_dict()
        key = (repr((d["scene"], d["data"], d["seed"])), name)
        if key not in self._splits:
            self._splits[key] = generate_split_in_memory(cfg, name)
        return self._splits[key]

    def model(self, cfg: ExperimentConfig):
        """Return (model, train summary), training only when no cached checkpoint exists."""
        d = self.run_dir(cfg)
        ckpt, summary_path = d / "model.pt", d / "train.json"
        if ckpt.exists() and summary_path.exists():
            model, _, _ = load_checkpoint(ckpt, cfg)
            return model, read_json(summary_path)
        log.info("training %s (seed %d)", cfg.config_hash(), cfg.seed)
        res = train(cfg, self.split(cfg, "train"))
        summary = {
            "config_hash": cfg.config_hash(),
            "seed": cfg.seed,
            "seconds": res.seconds,
            "epoch_losses": res.epoch_losses,
            "mode_counts": res.mode_counts,
        }
        save_checkpoint(res.model, cfg, ckpt, epoch=cfg.optim.epochs)
        write_json(d / "config.json", cfg.to_dict())
        write_json(summary_path, summary)
        return res.model, summary

    def report(self, cfg: ExperimentConfig, mode: Mode, k_prev: int | None = None,
               jobs: int = 1) -> EvalReport:
        k = cfg.querygen.k_prev if k_prev is None else k_prev
        path = self.run_dir(cfg) / f"eval_{mode.value}_k{k}.json"
        if path.exists():
            return EvalReport.from_dict(read_json(path))
        model, _ = self.model(cfg)
        t0 = time.time()
        rep, _ = evaluate_model(model, self.split(cfg, "val"), cfg, mode, k, jobs)
        log.info("eval %s %s k=%d: mAP %.4f (%.0fs)", cfg.config_hash(), mode.value, k,
                 rep.map_score, time.time() - t0)
        write_json(path, rep.to_dict())
        return rep

