"""Raster BEV encoder and the dynamic-position-query decoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import DecoderConfig, ExperimentConfig, QueryGenConfig
from .geometry import Category, MapElement, PerceptionRange, Polyline, is_closed_category
from .queries import (
    NON_PREV,
    LearnableBank,
    Mode,
    QuerySet,
    assemble,
    build_nonprev_queries,
)
from .synth import ConfigError, grid_shape

EPS = 1e-5


@dataclass
class BEVFeature:
    grid: torch.Tensor  # (B, H', W', D)
    cell_size: float
    range: PerceptionRange

    def centers(self) -> torch.Tensor:
        """Cell centers in meters, (H', W', 2)."""
        _, H, W, _ = self.grid.shape
        xs = self.range.x_min + (torch.arange(H, dtype=self.grid.dtype) + 0.5) * self.cell_size
        ys = self.range.y_min + (torch.arange(W, dtype=self.grid.dtype) + 0.5) * self.cell_size
        gx, gy = torch.meshgrid(xs, ys, indexing="ij")
        return torch.stack([gx, gy], dim=-1)


@dataclass
class LayerOutput:
    layer_index: int
    class_logits: torch.Tensor  # (B, M, C)
    locations: torch.Tensor  # (B, M, Nv, 2) meters
    position: torch.Tensor | None = None  # the position queries this layer consumed


@dataclass(frozen=True)
class GroupLayout:
    sizes: tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.sizes)

    def slices(self) -> list[slice]:
        out, start = [], 0
        for s in self.sizes:
            out.append(slice(start, start + s))
            start += s
        return out


class RasterEncoder(nn.Module):
    """Small strided conv stack: (B, H, W, C) raster -> (B, H/s, W/s, D)."""

    def __init__(self, in_channels: int, channels, strides, embed_dim: int):
        super().__init__()
        layers = [nn.Conv2d(in_channels, channels[0], 3, padding=1), nn.ReLU()]
        prev = channels[0]
        for i, s in enumerate(strides):
            out = channels[i + 1] if i + 1 < len(channels) else embed_dim
            k = 3 if s <= 2 else s
            pad = 1 if s <= 2 else 0
            layers += [nn.Conv2d(prev, out, k, stride=s, padding=pad)]
            if i + 1 < len(strides):
                layers.append(nn.ReLU())
            prev = out
        self.net = nn.Sequential(*layers)
        self.in_channels = in_channels
        self.stride = int(np.prod(strides))

    def output_shape(self, H: int, W: int) -> tuple[int, int]:
        if H % self.stride or W % self.stride:
            raise ConfigError(f"raster {H}x{W} not divisible by encoder stride {self.stride}")
        return H // self.stride, W // self.stride

    def forward(self, raster: torch.Tensor) -> torch.Tensor:
        if raster.shape[-1] != self.in_channels:
            raise ConfigError(f"expected {self.in_channels} raster channels, got {raster.shape[-1]}")
        self.output_shape(raster.shape[1], raster.shape[2])
        x = self.net(raster.permute(0, 3, 1, 2))
        return x.permute(0, 2, 3, 1)


class DecoderLayer(nn.Module):
    def __init__(self, D: int, heads: int, ffn: int, num_classes: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(D, heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(D, heads, batch_first=True)
        self.norm1, self.norm2, self.norm3 = nn.LayerNorm(D), nn.LayerNorm(D), nn.LayerNorm(D)
        self.ffn = nn.Sequential(nn.Linear(D, ffn), nn.ReLU(), nn.Linear(ffn, D))
        self.cls_head = nn.Linear(D, num_classes)
        self.reg_head = nn.Sequential(nn.Linear(D, D), nn.ReLU(), nn.Linear(D, 2))
        nn.init.zeros_(self.reg_head[-1].weight)
        nn.init.zeros_(self.reg_head[-1].bias)

    def forward(self, x, pos, layout: GroupLayout, valid, mem, mem_pos):
        B, M, Nv, D = x.shape
        q = x + pos
        outs = []
        for sl in layout.slices():
            n = sl.stop - sl.start
            if n == 0:
                continue
            qg = q[:, sl].reshape(B, n * Nv, D)
            vg = x[:, sl].reshape(B, n * Nv, D)
            pad = None
            if valid is not None and not bool(valid[:, sl].all()):
                pad = ~valid[:, sl, None].expand(B, n, Nv).reshape(B, n * Nv)
            a, _ = self.self_attn(qg, qg, vg, key_padding_mask=pad, need_weights=False)
            outs.append(a.reshape(B, n, Nv, D))
        x = self.norm1(x + torch.cat(outs, dim=1))
        tokens = (x + pos).reshape(B, M * Nv, D)
        a, _ = self.cross_attn(tokens, mem + mem_pos, mem, need_weights=False)
        x = self.norm2(x + a.reshape(B, M, Nv, D))
        x = self.norm3(x + self.ffn(x))
        return x


def inverse_sigmoid(u: torch.Tensor) -> torch.Tensor:
    u = u.clamp(EPS, 1 - EPS)
    return torch.log(u / (1 - u))


class MapDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, D: int):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(
            DecoderLayer(D, cfg.num_heads, cfg.ffn_dim, cfg.num_classes) for _ in range(cfg.num_layers)
        )

    def forward(self, content, position, init_locations, bev: BEVFeature, bank: LearnableBank,
                layout: GroupLayout, valid=None,
                position_hook: Callable | None = None) -> list[LayerOutput]:
        """Run all layers. Tensors are batched: content/position (B, M, Nv, D),
        init_locations (B, M, Nv, 2) in meters, valid (B, M) bool or None."""
        B, M, Nv, D = content.shape
        if M != layout.total:
            raise ValueError(f"query count {M} does not match group layout {layout.sizes}")
        if D != bev.grid.shape[-1]:
            raise ValueError("query and BEV feature dimensions differ")
        lo, span = bank.range_lo.to(content.dtype), bank.range_span.to(content.dtype)
        mem = bev.grid.reshape(B, -1, D)
        mem_pos = bank.pe(bev.centers().reshape(-1, 2))[None]
        x = content
        ref = init_locations
        outputs = []
        for n, layer in enumerate(self.layers):
            if n == 0 or not self.cfg.dynamic_position:
                pos = position
            else:
                pos = bank.pe(ref)
            if position_hook is not None:
                position_hook(n, pos, None if n == 0 else ref)
            x = layer(x, pos, layout, valid, mem, mem_pos)
            logits = layer.cls_head(x.mean(dim=2))
            u_prev = (ref - lo) / span
            u = torch.sigmoid(inverse_sigmoid(u_prev) + layer.reg_head(x))
            ref = lo + u * span
            outputs.append(LayerOutput(n, logits, ref, pos))
        return outputs


class MapModel(nn.Module):
    def __init__(self, cfg: ExperimentConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        q, d = cfg.querygen, cfg.decoder
        self.range = cfg.perception_range
        self.cell_size = cfg.scene.cell_size
        self.encoder = RasterEncoder(d.in_channels, d.encoder_channels, d.encoder_strides, q.embed_dim)
        H, W = grid_shape(self.range, self.cell_size)
        self.feat_hw = self.encoder.output_shape(H, W)
        self.bank = LearnableBank(q, self.range, d.num_groups)
        self.decoder = MapDecoder(d, q.embed_dim)

    @property
    def qcfg(self) -> QueryGenConfig:
        return self.cfg.querygen

    def encode_bev(self, raster: torch.Tensor) -> BEVFeature:
        feat = self.encoder(raster)
        cell = self.cell_size * self.encoder.stride
        return BEVFeature(feat, cell, self.range)

    def build_queries(self, modes, prevs, num_groups: int):
        """Batch per-sample primary QuerySets plus auxiliary groups.

        Returns content, position, init_locations, valid mask, layout and the
        per-sample primary QuerySets.
        """
        primaries = [assemble(m, p, self.bank, self.qcfg) for m, p in zip(modes, prevs)]
        Ni = self.qcfg.num_instance_queries
        K = max(qs.num_instances for qs in primaries) - Ni
        aux = [build_nonprev_queries(self.bank, self.qcfg, g) for g in range(1, num_groups)]
        contents, positions, inits, valids = [], [], [], []
        for qs in primaries:
            pad = Ni + K - qs.num_instances
            parts = [qs] + aux
            c = [p.content for p in parts]
            po = [p.position for p in parts]
            il = [p.init_locations for p in parts]
            v = [torch.ones(qs.num_instances, dtype=torch.bool)] + [torch.ones(Ni, dtype=torch.bool)] * len(aux)
            if pad:
                Nv, D = qs.content.shape[1:]
                z = qs.content.new_zeros(pad, Nv, D)
                c.insert(1, z)
                po.insert(1, z)
                il.insert(1, qs.init_locations[:1].detach().expand(pad, -1, -1))
                v.insert(1, torch.zeros(pad, dtype=torch.bool))
            contents.append(torch.cat(c))
            positions.append(torch.cat(po))
            inits.append(torch.cat(il))
            valids.append(torch.cat(v))
        layout = GroupLayout((Ni + K,) + (Ni,) * len(aux))
        valid = torch.stack(valids)
        if bool(valid.all()):
            valid = None
        return (torch.stack(contents), torch.stack(positions), torch.stack(inits), valid,
                layout, primaries)

    def forward(self, raster, modes=None, prevs=None, num_groups: int | None = None,
                position_hook=None):
        B = raster.shape[0]
        modes = modes or [Mode.SINGLE_FRAME] * B
        prevs = prevs or [None] * B
        G = self.cfg.decoder.num_groups if num_groups is None else num_groups
        bev = self.encode_bev(raster)
        content, position, init, valid, layout, primaries = self.build_queries(modes, prevs, G)
        outs = self.decoder(content, position, init, bev, self.bank, layout, valid, position_hook)
        return ModelOutput(outs, layout, valid, primaries)


@dataclass
class ModelOutput:
    layers: list[LayerOutput]
    layout: GroupLayout
    valid: torch.Tensor | None
    primaries: list[QuerySet]

    def primary_count(self, b: int) -> int:
        return self.primaries[b].num_instances


def scores(logits: torch.Tensor, score_fn: str = "sigmoid") -> torch.Tensor:
    if score_fn == "sigmoid":
        return torch.sigmoid(logits)
    if score_fn == "softmax":
        return torch.softmax(logits, dim=-1)
    raise ValueError(f"unknown score function {score_fn!r}")


def to_map_elements(logits: torch.Tensor, locations: torch.Tensor, score_threshold: float = 0.0,
                    score_fn: str = "sigmoid") -> list[MapElement]:
    """Turn one sample's primary-group output, (M, C) and (M, Nv, 2), into elements.

    Only instances whose top class probability is strictly above
    ``score_threshold`` are kept, so 0 keeps everything and 1.0 drops everything.
    """
    with torch.no_grad():
        prob = scores(logits.detach().double(), score_fn)
        conf, cat = prob.max(dim=-1)
        locs = locations.detach().double().cpu().numpy()
    out = []
    for m in range(prob.shape[0]):
        c = float(conf[m])
        if not c > score_threshold:
            continue
        category = Category(int(cat[m]))
        out.append(MapElement(category, Polyline(locs[m], is_closed_category(category)), min(c, 1.0)))
    return out
