"""Experiment configuration: dataclasses, YAML loading and config hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .geometry import PerceptionRange
from .synth import ConfigError, OcclusionSpec, SceneSpec


@dataclass
class QueryGenConfig:
    num_instance_queries: int = 50
    num_points: int = 10
    embed_dim: int = 128
    p_single: float = 0.5
    k_prev: int = 10
    pe_temperature: float = 10000.0
    use_prev_predictions: bool = True

    def validate(self):
        if not 0.0 <= self.p_single <= 1.0:
            raise ConfigError("p_single must lie in [0, 1]")
        if self.k_prev < 0:
            raise ConfigError("k_prev must be >= 0")
        if min(self.num_instance_queries, self.num_points, self.embed_dim) < 1:
            raise ConfigError("Ni, Nv and D must be >= 1")
        if self.embed_dim % 4:
            raise ConfigError("embed_dim must be divisible by 4 for the sinusoidal encoding")


@dataclass
class DecoderConfig:
    num_layers: int = 4
    num_heads: int = 4
    ffn_dim: int = 256
    num_groups: int = 3
    num_classes: int = 3
    dynamic_position: bool = True
    encoder_channels: tuple[int, ...] = (32, 64)
    encoder_strides: tuple[int, ...] = (2, 5)
    in_channels: int = 4

    def validate(self, embed_dim: int):
        if embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.num_groups < 1 or self.num_layers < 1:
            raise ConfigError("num_groups and num_layers must be >= 1")
        if len(self.encoder_channels) != len(self.encoder_strides):
            raise ConfigError("encoder_channels and encoder_strides must have equal length")


@dataclass
class LossConfig:
    cls_weight: float = 2.0
    pts_weight: float = 5.0
    aux_weight: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass
class OptimConfig:
    lr: float = 3e-4
    weight_decay: float = 0.01
    cosine: bool = True
    epochs: int = 30
    batch_size: int = 8
    grad_clip: float = 5.0
    warmup_steps: int = 100


@dataclass
class APConfig:
    thresholds: tuple[float, ...] = (0.5, 1.0, 1.5)
    eval_point_count: int = 100

    def validate(self):
        th = list(self.thresholds)
        if not th or any(t <= 0 for t in th) or any(b <= a for a, b in zip(th, th[1:])):
            raise ConfigError("AP thresholds must be positive and strictly increasing")


@dataclass
class DataConfig:
    num_train: int = 200
    num_val: int = 60
    lane_choices: tuple[int, ...] = (2, 3, 4)
    # sequences are split by index: the first num_train go to train
    min_crossing_gap: float = 15.0


@dataclass
class RuntimeConfig:
    score_threshold: float = 0.4
    eval_score_threshold: float = 0.0
    max_pose_jump: float = 25.0


@dataclass
class ExperimentConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    data: DataConfig = field(default_factory=DataConfig)
    querygen: QueryGenConfig = field(default_factory=QueryGenConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: APConfig = field(default_factory=APConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)
    seed: int = 0
    output_dir: str = "runs/default"

    def validate(self):
        self.scene.validate()
        self.querygen.validate()
        self.decoder.validate(self.querygen.embed_dim)
        self.eval.validate()
        if self.scene.num_points != self.querygen.num_points:
            raise ConfigError("scene.num_points must equal querygen.num_points")
        return self

    @property
    def perception_range(self) -> PerceptionRange:
        return self.scene.perception_range

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _from_dict(cls, d or {})

    def model_hash(self) -> str:
        """Hash of everything that determines the parameter tensors."""
        d = self.to_dict()
        q = d["querygen"]
        payload = {
            "querygen": {k: q[k] for k in ("num_instance_queries", "num_points", "embed_dim", "pe_temperature")},
            "decoder": d["decoder"],
            "range": d["scene"]["perception_range"],
            "cell_size": d["scene"]["cell_size"],
        }
        return _hash(payload)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return _hash(d)


def _hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


_NESTED = {
    ExperimentConfig: {"scene": SceneSpec, "data": DataConfig, "querygen": QueryGenConfig,
                       "decoder": DecoderConfig, "loss": LossConfig, "optim": OptimConfig,
                       "eval": APConfig, "runtime": RuntimeConfig},
    SceneSpec: {"occlusion": OcclusionSpec, "perception_range": PerceptionRange},
}


def _from_dict(cls, d: dict):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    nested = _NESTED.get(cls, {})
    for k, v in d.items():
        if k in nested:
            kwargs[k] = _from_dict(nested[k], v or {})
        elif isinstance(v, list):
            kwargs[k] = tuple(v)
        else:
            kwargs[k] = v
    return cls(**kwargs)


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    d = {}
    if path is not None:
        with open(path) as fh:
            d = yaml.safe_load(fh) or {}
    if overrides:
        d = merge(d, overrides)
    return ExperimentConfig.from_dict(d).validate()


def save_config(cfg: ExperimentConfig, path: str | Path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def replace(cfg: ExperimentConfig, **sections) -> ExperimentConfig:
    """Return a copy with nested overrides, e.g. ``replace(cfg, querygen={"k_prev": 0})``."""
    return ExperimentConfig.from_dict(merge(cfg.to_dict(), sections)).validate()


def paper_scale_preset() -> dict:
    """Full-scale query/decoder settings (not the desk-scale default)."""
    return {
        "scene": {"num_points": 20},
        "querygen": {"num_instance_queries": 100, "num_points": 20, "embed_dim": 256, "k_prev": 10},
        "decoder": {"num_layers": 6, "num_groups": 6, "num_heads": 8, "ffn_dim": 512},
        "optim": {"lr": 6e-4, "batch_size": 16, "epochs": 24},
    }
