"""Hierarchical decoder queries in single-frame and temporal modes.

Non-previous queries combine learnable instance and point embeddings, with
point positions encoded from learnable initial locations. Queries built from
previous predictions encode category and confidence into the content and
derive their position purely from the predicted point locations.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import QueryGenConfig
from .geometry import NUM_CLASSES, MapElement, PerceptionRange
from .synth import ConfigError


class Mode(str, enum.Enum):
    SINGLE_FRAME = "single_frame"
    TEMPORAL = "temporal"


NON_PREV = 0
PREV_PRED = 1


class PositionEncoder(nn.Module):
    """Sinusoidal features of (x, y) in meters followed by a linear projection."""

    def __init__(self, embed_dim: int, temperature: float = 10000.0):
        super().__init__()
        if embed_dim % 2:
            raise ConfigError("position encoding needs an even embedding size")
        if embed_dim % 4:
            raise ConfigError("position encoding needs embed_dim divisible by 4")
        self.embed_dim = embed_dim
        self.temperature = temperature
        self.num_freqs = embed_dim // 4
        self.proj = nn.Linear(embed_dim, embed_dim)

    def frequencies(self, dtype, device) -> torch.Tensor:
        k = torch.arange(self.num_freqs, dtype=dtype, device=device)
        return self.temperature ** (-k / self.num_freqs)

    def sinusoid(self, loc: torch.Tensor) -> torch.Tensor:
        freqs = self.frequencies(loc.dtype, loc.device)
        feats = []
        for c in range(2):
            ang = loc[..., c : c + 1] * freqs
            feats.append(torch.stack([ang.sin(), ang.cos()], dim=-1).flatten(-2))
        return torch.cat(feats, dim=-1)

    def forward(self, loc: torch.Tensor) -> torch.Tensor:
        return self.proj(self.sinusoid(loc))


class LearnableBank(nn.Module):
    """Learnable query embeddings. Instance-level tensors carry one slice per group."""

    def __init__(self, cfg: QueryGenConfig, rng: PerceptionRange, num_groups: int = 1):
        super().__init__()
        Ni, Nv, D = cfg.num_instance_queries, cfg.num_points, cfg.embed_dim
        self.range = rng
        self.q_con_ins = nn.Parameter(torch.randn(num_groups, Ni, D))
        self.q_pos_ins = nn.Parameter(torch.randn(num_groups, Ni, D))
        self.q_con_pt = nn.Parameter(torch.randn(Nv, D))
        self.q_loc_pt_raw = nn.Parameter(torch.randn(Nv, 2))
        self.cate_proj = nn.Linear(NUM_CLASSES, D)
        self.conf_proj = nn.Linear(1, D)
        self.pe = PositionEncoder(D, cfg.pe_temperature)
        lo = torch.tensor([rng.x_min, rng.y_min])
        span = torch.tensor([rng.length, rng.width])
        self.register_buffer("range_lo", lo, persistent=False)
        self.register_buffer("range_span", span, persistent=False)

    @property
    def num_groups(self) -> int:
        return self.q_con_ins.shape[0]

    def q_loc_pt(self) -> torch.Tensor:
        """Initial point locations in meters, squashed into the perception range."""
        return self.range_lo + torch.sigmoid(self.q_loc_pt_raw) * self.range_span


@dataclass
class QuerySet:
    content: torch.Tensor  # (M, Nv, D)
    position: torch.Tensor  # (M, Nv, D)
    init_locations: torch.Tensor  # (M, Nv, 2) meters
    origin: torch.Tensor  # (M,) int: NON_PREV / PREV_PRED

    @property
    def num_instances(self) -> int:
        return self.content.shape[0]

    @property
    def num_prev(self) -> int:
        return int((self.origin == PREV_PRED).sum())

    def cat(self, other: "QuerySet") -> "QuerySet":
        return QuerySet(
            torch.cat([self.content, other.content]),
            torch.cat([self.position, other.position]),
            torch.cat([self.init_locations, other.init_locations]),
            torch.cat([self.origin, other.origin]),
        )


def positional_encode(locations: torch.Tensor, bank: LearnableBank) -> torch.Tensor:
    return bank.pe(locations)


def build_nonprev_queries(bank: LearnableBank, cfg: QueryGenConfig, group: int = 0) -> QuerySet:
    loc = bank.q_loc_pt()  # (Nv, 2)
    Ni = bank.q_con_ins.shape[1]
    content = bank.q_con_ins[group][:, None, :] + bank.q_con_pt[None, :, :]
    position = bank.q_pos_ins[group][:, None, :] + positional_encode(loc, bank)[None, :, :]
    init = loc[None].expand(Ni, -1, -1)
    origin = torch.full((Ni,), NON_PREV, dtype=torch.long)
    return QuerySet(content, position, init, origin)


def elements_to_tensors(prev: list[MapElement], num_points: int, dtype=torch.float32):
    if any(len(e.points) != num_points for e in prev):
        raise ValueError(f"previous predictions must carry exactly {num_points} points")
    k = len(prev)
    pts = torch.tensor(np.array([e.points for e in prev]).reshape(k, num_points, 2), dtype=dtype)
    cats = torch.tensor([int(e.category) for e in prev], dtype=torch.long)
    conf = torch.tensor([e.confidence for e in prev], dtype=dtype).reshape(k, 1)
    return pts, cats, conf


def build_prevpred_queries(prev: list[MapElement], bank: LearnableBank, cfg: QueryGenConfig) -> QuerySet:
    dtype = bank.q_con_pt.dtype
    pts, cats, conf = elements_to_tensors(prev, cfg.num_points, dtype)
    one_hot = torch.nn.functional.one_hot(cats, NUM_CLASSES).to(dtype)
    inst = bank.cate_proj(one_hot) + bank.conf_proj(conf)  # (k, D)
    content = inst[:, None, :] + bank.q_con_pt[None, :, :]
    position = positional_encode(pts, bank)
    origin = torch.full((len(prev),), PREV_PRED, dtype=torch.long)
    return QuerySet(content, position, pts, origin)


def assemble(mode: Mode, prev: list[MapElement] | None, bank: LearnableBank,
             cfg: QueryGenConfig) -> QuerySet:
    base = build_nonprev_queries(bank, cfg)
    if Mode(mode) is Mode.SINGLE_FRAME:
        return base
    if prev is None:
        raise ValueError("temporal mode needs a (possibly empty) list of previous predictions")
    if not prev:
        return base
    return base.cat(build_prevpred_queries(prev, bank, cfg))


def select_mode(is_training: bool, is_first_frame: bool, has_prev: bool,
                rng: np.random.Generator | None, cfg: QueryGenConfig) -> Mode:
    if not has_prev or not cfg.use_prev_predictions:
        return Mode.SINGLE_FRAME
    if is_training:
        return Mode.SINGLE_FRAME if rng.random() < cfg.p_single else Mode.TEMPORAL
    return Mode.SINGLE_FRAME if is_first_frame else Mode.TEMPORAL


def top_k_select(preds: list[MapElement], k: int) -> list[MapElement]:
    """Highest-confidence ``k`` elements, descending; ties keep input order."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i].confidence)
    return [preds[i] for i in order[: max(k, 0)]]
