"""Chamfer-distance average precision over vectorized map predictions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import APConfig
from .geometry import Category, MapElement, resample_polyline

SCHEMA_VERSION = 1


class DataError(ValueError):
    pass


@dataclass
class EvalReport:
    ap: dict[tuple[str, float], float]
    ap_category: dict[str, float]
    map_score: float
    counts: dict[str, dict[str, int]] = field(default_factory=dict)
    thresholds: tuple[float, ...] = (0.5, 1.0, 1.5)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "thresholds": list(self.thresholds),
            "ap": {f"{c}@{t}": v for (c, t), v in self.ap.items()},
            "ap_category": self.ap_category,
            "mAP": self.map_score,
            "counts": self.counts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"unsupported report schema {d.get('schema_version')}")
        ap = {}
        for k, v in d["ap"].items():
            c, t = k.rsplit("@", 1)
            ap[(c, float(t))] = v
        return cls(ap, d["ap_category"], d["mAP"], d.get("counts", {}), tuple(d["thresholds"]))


def _points(e: MapElement, n: int) -> np.ndarray:
    return resample_polyline(e.geometry, n).points


def chamfer_matrix(pred_pts: list[np.ndarray], gt_pts: list[np.ndarray]) -> np.ndarray:
    """Pairwise Chamfer distances, (n_pred, n_gt)."""
    if not pred_pts or not gt_pts:
        return np.zeros((len(pred_pts), len(gt_pts)))
    P = np.stack(pred_pts)  # (p, n, 2)
    G = np.stack(gt_pts)  # (g, n, 2)
    d = np.sqrt(((P[:, None, :, None, :] - G[None, :, None, :, :]) ** 2).sum(-1))  # (p, g, n, n)
    return 0.5 * (d.min(axis=3).mean(axis=2) + d.min(axis=2).mean(axis=2))


def greedy_match_at_threshold(preds, gts, t: float, dist: np.ndarray | None = None,
                              eval_point_count: int = 100) -> list[bool]:
    """TP flag per prediction; ``preds`` must already be sorted by confidence."""
    if dist is None:
        dist = chamfer_matrix([_points(p, eval_point_count) for p in preds],
                              [_points(g, eval_point_count) for g in gts])
    claimed = np.zeros(len(gts), dtype=bool)
    flags = []
    for i in range(len(preds)):
        if not len(gts):
            flags.append(False)
            continue
        d = np.where(claimed, np.inf, dist[i])
        j = int(np.argmin(d))
        if d[j] < t:
            claimed[j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(tp_flags, num_gt: int) -> float:
    """All-point interpolated area under the precision-recall curve."""
    tp = np.asarray(tp_flags, dtype=bool)
    if num_gt == 0:
        return 1.0 if len(tp) == 0 else 0.0
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_r) * env))


def evaluate(frames, cfg: APConfig = APConfig()) -> EvalReport:
    """``frames`` is a list of (preds, gts) element lists in the ego frame.

    Predictions are ranked globally per category; gts are claimed per frame.
    """
    cats = [c.label for c in Category]
    n = cfg.eval_point_count
    ap: dict[tuple[str, float], float] = {}
    counts = {}
    for cat in Category:
        entries = []  # (confidence, frame, pred_index)
        per_frame = []
        num_gt = 0
        for fi, (preds, gts) in enumerate(frames):
            for e in list(preds) + list(gts):
                if not isinstance(e.category, Category):
                    raise DataError(f"unknown category {e.category!r}")
            ps = [p for p in preds if p.category == cat]
            gs = [g for g in gts if g.category == cat]
            num_gt += len(gs)
            dist = chamfer_matrix([_points(p, n) for p in ps], [_points(g, n) for g in gs])
            per_frame.append((ps, gs, dist))
            entries += [(p.confidence, fi, i) for i, p in enumerate(ps)]
        # stable: equal confidences keep (frame, index) order
        order = sorted(range(len(entries)), key=lambda k: -entries[k][0])
        for t in cfg.thresholds:
            claimed = [np.zeros(len(gs), dtype=bool) for _, gs, _ in per_frame]
            flags = []
            for k in order:
                _, fi, i = entries[k]
                _, gs, dist = per_frame[fi]
                if not len(gs):
                    flags.append(False)
                    continue
                d = np.where(claimed[fi], np.inf, dist[i])
                j = int(np.argmin(d))
                hit = bool(d[j] < t)
                if hit:
                    claimed[fi][j] = True
                flags.append(hit)
            ap[(cat.label, float(t))] = average_precision(flags, num_gt)
        counts[cat.label] = {"gt": num_gt, "pred": len(entries)}
    ap_cat = {c: float(np.mean([ap[(c, float(t))] for t in cfg.thresholds])) for c in cats}
    return EvalReport(ap, ap_cat, float(np.mean(list(ap_cat.values()))), counts, tuple(cfg.thresholds))


def format_report(r: EvalReport) -> str:
    head = "  ".join(f"AP_{c[:3]}" for c in r.ap_category) + "   mAP"
    vals = "  ".join(f"{100 * v:6.1f}" for v in r.ap_category.values()) + f"  {100 * r.map_score:5.1f}"
    return head + "\n" + vals
