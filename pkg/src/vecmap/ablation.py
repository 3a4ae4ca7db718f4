"""Ablation runners over the experiment axes: components, mode, probability and k."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig, replace
from .evaluation import SCHEMA_VERSION, EvalReport
from .experiments import RunCache
from .queries import Mode

AXES = ("components", "mode", "probability", "k")

# (use_prev_predictions, dynamic_position) per component label
COMPONENTS = {
    "baseline": (False, False),
    "generator": (True, False),
    "decoder": (False, True),
    "generator+decoder": (True, True),
}

DEFAULT_GRIDS = {
    "components": ["baseline", "generator+decoder"],
    "mode": ["single_frame", "temporal"],
    "probability": [0.4, 0.5, 0.6],
    "k": [0, 5, 10],
}


@dataclass
class AblationRow:
    label: str
    seed: int
    config_hash: str
    mode: str
    k_prev: int
    report: EvalReport

    def to_dict(self) -> dict:
        return {"label": self.label, "seed": self.seed, "config_hash": self.config_hash,
                "mode": self.mode, "k_prev": self.k_prev, "report": self.report.to_dict()}


@dataclass
class AblationTable:
    axis: str
    grid: list
    seeds: list[int]
    rows: list[AblationRow] = field(default_factory=list)

    def labels(self) -> list[str]:
        return [str(g) for g in self.grid]

    def per_seed(self, label: str) -> list[float]:
        return [r.report.map_score for r in self.rows if r.label == label]

    def mean(self, label: str) -> float:
        return float(np.mean(self.per_seed(label)))

    def row(self, label: str, seed: int) -> AblationRow:
        for r in self.rows:
            if r.label == label and r.seed == seed:
                return r
        raise KeyError((label, seed))

    def summary(self) -> list[dict]:
        out = []
        for lab in self.labels():
            rows = [r for r in self.rows if r.label == lab]
            cats = rows[0].report.ap_category.keys()
            out.append({
                "label": lab,
                "mAP_mean": self.mean(lab),
                "mAP_per_seed": self.per_seed(lab),
                "ap_category_mean": {c: float(np.mean([r.report.ap_category[c] for r in rows])) for c in cats},
            })
        return out

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "axis": self.axis, "grid": self.grid,
                "seeds": self.seeds, "rows": [r.to_dict() for r in self.rows],
                "summary": self.summary()}

    def to_text(self) -> str:
        summ = self.summary()
        cats = list(summ[0]["ap_category_mean"]) if summ else []
        head = [self.axis] + [f"AP_{c[:3]}" for c in cats] + ["mAP"] + [f"seed{s}" for s in self.seeds]
        body = []
        for s in summ:
            body.append([s["label"]] + [f"{100 * s['ap_category_mean'][c]:.2f}" for c in cats]
                        + [f"{100 * s['mAP_mean']:.2f}"] + [f"{100 * v:.2f}" for v in s["mAP_per_seed"]])
        widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
        fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)  # noqa: E731
                                  for i, (c, w) in enumerate(zip(r, widths)))
        lines = [fmt(head), "  ".join("-" * w for w in widths)] + [fmt(r) for r in body]
        return "\n".join(lines) + "\n"


def cell_config(axis: str, value, base: ExperimentConfig, seed: int) -> tuple[ExperimentConfig, Mode, int | None]:
    """Training config, evaluation mode and evaluation k for one grid cell."""
    cfg = replace(base, seed=seed)
    if axis == "components":
        use_prev, dynamic = COMPONENTS[value]
        cfg = replace(cfg, querygen={"use_prev_predictions": use_prev},
                      decoder={"dynamic_position": dynamic})
        return cfg, Mode.TEMPORAL if use_prev else Mode.SINGLE_FRAME, None
    if axis == "mode":
        return cfg, Mode(value), None
    if axis == "probability":
        return replace(cfg, querygen={"p_single": float(value)}), Mode.TEMPORAL, None
    if axis == "k":
        # k applies to the query generator at inference; the model is trained once
        return cfg, Mode.TEMPORAL, int(value)
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")


def run_ablation(axis: str, grid, base: ExperimentConfig, seeds=(0,), cache: RunCache | None = None,
                 jobs: int = 1) -> AblationTable:
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")
    grid = list(DEFAULT_GRIDS[axis] if grid is None else grid)
    cache = cache or RunCache(base.output_dir)
    table = AblationTable(axis, grid, list(seeds))
    for value in grid:
        for seed in seeds:
            cfg, mode, k = cell_config(axis, value, base, seed)
            rep = cache.report(cfg, mode, k, jobs)
            k_used = cfg.querygen.k_prev if k is None else k
            table.rows.append(AblationRow(str(value), seed, cfg.config_hash(), mode.value, k_used, rep))
    return table


# axes run by the desk suite, with the seeds each uses; the full model trained
# for "mode" is reused by the other axes through the cache
SUITE = (("mode", None), ("components", None), ("k", None), ("probability", (0,)))


def run_suite(base: ExperimentConfig, cache: RunCache, seeds=(0, 1, 2), jobs: int = 1,
              out_dir=None) -> dict[str, AblationTable]:
    """Run every ablation axis; tables are written to ``out_dir`` as they finish."""
    from pathlib import Path

    from .io import atomic_write_text, write_json

    tables = {}
    for axis, axis_seeds in SUITE:
        table = run_ablation(axis, None, base, list(axis_seeds or seeds), cache, jobs)
        tables[axis] = table
        if out_dir is not None:
            write_json(Path(out_dir) / f"ablation_{axis}.json", table.to_dict())
            atomic_write_text(Path(out_dir) / f"ablation_{axis}.txt", table.to_text())
    return tables
