"""Permutation-aware Hungarian matching and the set-prediction losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .config import LossConfig
from .geometry import MapElement, PerceptionRange, equivalent_permutations


@dataclass
class Assignment:
    pairs: list[tuple[int, int, int]]  # (pred_index, gt_index, best_permutation_index)
    unmatched_preds: list[int]
    total_cost: float = 0.0


@dataclass
class LossBreakdown:
    cls_loss: torch.Tensor
    pts_loss: torch.Tensor
    per_layer: list[torch.Tensor] = field(default_factory=list)
    per_group: list[torch.Tensor] = field(default_factory=list)
    total: torch.Tensor | None = None

    def as_floats(self) -> dict:
        return {
            "cls_loss": float(self.cls_loss),
            "pts_loss": float(self.pts_loss),
            "total": float(self.total),
            "per_layer": [float(v) for v in self.per_layer],
            "per_group": [float(v) for v in self.per_group],
        }


def point_l1(a, b):
    """Mean over points of |dx| + |dy|. Works for numpy arrays and tensors."""
    return abs(a - b).sum(-1).mean(-1)


def normalize(points, rng: PerceptionRange):
    lo = (rng.x_min, rng.y_min)
    span = (rng.length, rng.width)
    if isinstance(points, torch.Tensor):
        return (points - points.new_tensor(lo)) / points.new_tensor(span)
    return (np.asarray(points, dtype=np.float64) - np.array(lo)) / np.array(span)


def match_cost(class_probs, locations, gt: MapElement, rng: PerceptionRange,
               weights: LossConfig = LossConfig()) -> tuple[float, int]:
    """Cost of pairing one prediction with one ground-truth element.

    ``locations`` are meters (Nv, 2); geometry is compared in range-normalized
    coordinates. Returns (cost, index of the best equivalent permutation).
    """
    probs = np.asarray(class_probs, dtype=np.float64)
    pred = normalize(locations, rng)
    perms = normalize(equivalent_permutations(gt), rng)
    d = point_l1(pred[None], perms)
    best = int(np.argmin(d))
    cost = -weights.cls_weight * probs[int(gt.category)] + weights.pts_weight * d[best]
    return float(cost), best


@dataclass
class GTTensors:
    perms: torch.Tensor  # (n_gt, P, Nv, 2), normalized, padded by repetition
    perm_valid: torch.Tensor  # (n_gt, P) bool
    labels: torch.Tensor  # (n_gt,)

    @property
    def count(self) -> int:
        return self.labels.shape[0]


def gt_tensors(gts: list[MapElement], rng: PerceptionRange, num_points: int,
               dtype=torch.float32) -> GTTensors:
    if not gts:
        return GTTensors(torch.zeros(0, 1, num_points, 2, dtype=dtype),
                         torch.zeros(0, 1, dtype=torch.bool), torch.zeros(0, dtype=torch.long))
    perms = [normalize(equivalent_permutations(g), rng) for g in gts]
    P = max(len(p) for p in perms)
    out = np.zeros((len(gts), P, num_points, 2))
    valid = np.zeros((len(gts), P), dtype=bool)
    for i, p in enumerate(perms):
        out[i, : len(p)] = p
        out[i, len(p):] = p[0]
        valid[i, : len(p)] = True
    labels = torch.tensor([int(g.category) for g in gts], dtype=torch.long)
    return GTTensors(torch.as_tensor(out, dtype=dtype), torch.as_tensor(valid), labels)


def cost_matrix(logits: torch.Tensor, locs_norm: torch.Tensor, gt: GTTensors, weights: LossConfig):
    """Vectorised costs. logits (..., n, C), locs_norm (..., n, Nv, 2).

    Returns cost (..., n, n_gt) and best_perm (..., n, n_gt).
    """
    probs = torch.sigmoid(logits)
    d = point_l1(locs_norm[..., :, None, None, :, :], gt.perms)  # (..., n, n_gt, P)
    d = d.masked_fill(~gt.perm_valid, float("inf"))
    dmin, best = d.min(dim=-1)
    cls = probs[..., gt.labels]
    return -weights.cls_weight * cls + weights.pts_weight * dmin, best


def _lexicographic_refine(cost: np.ndarray, rows, cols, optimum: float):
    """Among optimal assignments pick the lexicographically smallest, rows in order."""
    n_gt, n_pred = cost.shape
    tol = 1e-12 * (1.0 + abs(optimum))
    fixed: dict[int, int] = {}
    fixed_cost = 0.0
    used: set[int] = set()
    n_assign = min(n_gt, n_pred)
    for g in range(n_gt):
        remaining_rows = [r for r in range(g + 1, n_gt)]
        chosen = None
        # the row may legitimately stay unmatched if n_pred < n_gt
        options = [p for p in range(n_pred) if p not in used] + [None]
        for p in options:
            free_cols = [c for c in range(n_pred) if c not in used and c != p]
            need = n_assign - len(fixed) - (p is not None)
            if need < 0 or need > min(len(remaining_rows), len(free_cols)):
                continue
            rest = 0.0
            if need and remaining_rows and free_cols:
                sub = cost[np.ix_(remaining_rows, free_cols)]
                r, c = linear_sum_assignment(sub)
                if len(r) != need:
                    continue
                rest = float(sub[r, c].sum())
            total = fixed_cost + (cost[g, p] if p is not None else 0.0) + rest
            if total <= optimum + tol:
                chosen = p
                break
        if chosen is not None:
            fixed[g] = chosen
            used.add(chosen)
            fixed_cost += float(cost[g, chosen])
    rows = np.array(sorted(fixed), dtype=int)
    cols = np.array([fixed[g] for g in rows], dtype=int)
    return rows, cols


def hungarian_match(cost, best_perm=None) -> Assignment:
    """Minimum-cost injective matching of ground truths to predictions.

    ``cost`` is (n_pred, n_gt). Exact ties are broken lexicographically by
    (gt_index, pred_index).
    """
    c = np.asarray(cost, dtype=np.float64)
    n_pred, n_gt = c.shape
    if n_pred == 0 or n_gt == 0:
        return Assignment([], list(range(n_pred)), 0.0)
    ct = c.T
    rows, cols = linear_sum_assignment(ct)
    optimum = float(ct[rows, cols].sum())
    if np.unique(ct).size < ct.size or np.all(ct == np.round(ct)):
        rows, cols = _lexicographic_refine(ct, rows, cols, optimum)
    bp = None if best_perm is None else np.asarray(best_perm)
    pairs = [(int(p), int(g), 0 if bp is None else int(bp[p, g])) for g, p in zip(rows, cols)]
    pairs.sort(key=lambda t: t[1])
    matched = {p for p, _, _ in pairs}
    return Assignment(pairs, [i for i in range(n_pred) if i not in matched],
                      float(sum(c[p, g] for p, g, _ in pairs)))


def sigmoid_focal_loss(logits: torch.Tensor, targets: torch.Tensor, alpha=0.25, gamma=2.0):
    """Elementwise sigmoid focal loss (not reduced)."""
    p = torch.sigmoid(logits)
    ce = torch.nn.functional.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    a_t = alpha * targets + (1 - alpha) * (1 - targets)
    return a_t * (1 - p_t) ** gamma * ce


def one_to_one_loss(logits: torch.Tensor, locs_norm: torch.Tensor, gt: GTTensors,
                    assignment: Assignment, weights: LossConfig):
    """Focal classification + point L1 for one group at one layer.

    logits (n, C), locs_norm (n, Nv, 2). Returns (cls_loss, pts_loss).
    """
    targets = torch.zeros_like(logits)
    for p, g, _ in assignment.pairs:
        targets[p, int(gt.labels[g])] = 1.0
    norm = max(1, gt.count)
    cls = sigmoid_focal_loss(logits, targets, weights.focal_alpha, weights.focal_gamma).sum() / norm
    if assignment.pairs:
        pi = torch.tensor([p for p, _, _ in assignment.pairs])
        gi = torch.tensor([g for _, g, _ in assignment.pairs])
        bi = torch.tensor([b for _, _, b in assignment.pairs])
        pts = point_l1(locs_norm[pi], gt.perms[gi, bi]).sum() / len(assignment.pairs)
    else:
        pts = locs_norm.sum() * 0.0
    return cls, pts


def match_group(logits, locs_norm, gt: GTTensors, weights: LossConfig) -> Assignment:
    with torch.no_grad():
        cost, best = cost_matrix(logits.detach(), locs_norm.detach(), gt, weights)
    return hungarian_match(cost.double().cpu().numpy(), best.cpu().numpy())


def group_one_to_many_loss(layers_logits, layers_locs, gt: GTTensors, group_slices,
                           weights: LossConfig, valid=None, return_assignments: bool = False):
    """Loss for one sample over all layers and groups.

    layers_logits[n] is (M, C), layers_locs[n] is (M, Nv, 2) normalized; the first
    slice is the primary group, the rest auxiliary groups matched independently.
    """
    zero = layers_logits[0].sum() * 0.0
    cls_total, pts_total = zero, zero
    per_layer = []
    per_group = [zero for _ in group_slices]
    assignments = []
    for logits, locs in zip(layers_logits, layers_locs):
        layer_total = zero
        layer_assign = []
        for gi, sl in enumerate(group_slices):
            idx = torch.arange(sl.start, sl.stop)
            if valid is not None:
                idx = idx[valid[sl]]
            lg, lc = logits[idx], locs[idx]
            a = match_group(lg, lc, gt, weights)
            layer_assign.append(a)
            cls, pts = one_to_one_loss(lg, lc, gt, a, weights)
            w = 1.0 if gi == 0 else weights.aux_weight
            contrib = weights.cls_weight * cls + weights.pts_weight * pts
            per_group[gi] = per_group[gi] + contrib
            cls_total = cls_total + w * cls
            pts_total = pts_total + w * pts
            layer_total = layer_total + w * contrib
        per_layer.append(layer_total)
        assignments.append(layer_assign)
    total = weights.cls_weight * cls_total + weights.pts_weight * pts_total
    out = LossBreakdown(cls_total, pts_total, per_layer, per_group, total)
    if return_assignments:
        return out, assignments
    return out


def model_loss(model_out, gts_batch: list[list[MapElement]], rng: PerceptionRange,
               weights: LossConfig, num_points: int) -> tuple[torch.Tensor, list[LossBreakdown]]:
    """Mean over the batch of per-sample group-wise losses."""
    slices = model_out.layout.slices()
    dtype = model_out.layers[0].locations.dtype
    breakdowns = []
    for b, gts in enumerate(gts_batch):
        gt = gt_tensors(gts, rng, num_points, dtype)
        logits = [lo.class_logits[b] for lo in model_out.layers]
        locs = [normalize(lo.locations[b], rng) for lo in model_out.layers]
        valid = None if model_out.valid is None else model_out.valid[b]
        breakdowns.append(group_one_to_many_loss(logits, locs, gt, slices, weights, valid))
    total = torch.stack([bd.total for bd in breakdowns]).mean()
    return total, breakdowns

