"""Run configuration (JSON). Unknown keys are rejected at every level.

Defaults describe the desk-scale setup: a 1-channel 8x8 codec with a 6x
temporal factor, a 2-block d_model=128 DiT, and 4 synthetic scenes. A
full-size model would use 48 blocks, text embedding width 4096 and codec
(ft, fs, p) = (6, 8, 2) on 3-channel 720p video.
"""

from __future__ import annotations

import json
import os
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional

from .codec import CodecSpec
from .conditioning import embed_text
from .flow_matching import DropoutSpec, ScheduleSpec
from .mmdit import ModelConfig
from .sampler import CachePolicy, GuidanceConfig

SEED_ENV = "MIRAGE_MINI_SEED"


@dataclass
class ModelDims:
    d_model: int = 128
    heads: int = 4
    depth: int = 2
    mlp_ratio: int = 4
    d_text: int = 64
    rope_theta: float = 10000.0
    dtype: str = "float32"


@dataclass
class DataConfig:
    n_scenes: int = 4
    coupling: float = 1.0
    total_frames: int = 37
    window_frames: int = 13
    height: int = 8
    width: int = 8
    audio_rate: float = 50.0
    path: Optional[str] = None  # directory written by `make-data`; synthesised in memory when unset


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.01
    steps: int = 200
    repeats: int = 4  # noise/time draws per scene per step
    checkpoint_every: int = 50


@dataclass
class SamplingConfig:
    cfg_hi: float = 2.0
    cfg_lo: float = 1.0
    stg_weight: float = 0.0
    stg_skip_layers: tuple = ()
    negative_text: Optional[str] = None
    cache_enabled: bool = True
    uncond_reuse_after: Optional[int] = None
    attn_reuse_stride: int = 2

    def guidance(self, d_text: int) -> GuidanceConfig:
        neg = embed_text(self.negative_text, d_text) if self.negative_text else None
        return GuidanceConfig(self.cfg_hi, self.cfg_lo, self.stg_weight, tuple(self.stg_skip_layers), neg,
                              CachePolicy(self.cache_enabled, self.uncond_reuse_after, self.attn_reuse_stride))


@dataclass
class RunConfig:
    model: ModelDims = field(default_factory=ModelDims)
    codec: CodecSpec = field(default_factory=lambda: CodecSpec(6, 2, 2, 1))
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    dropout: DropoutSpec = field(default_factory=DropoutSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig.for_clip(self.codec, self.data.window_frames, self.data.height, self.data.width,
                                    **asdict(self.model))

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "config")

    @classmethod
    def load(cls, path=None, env: bool = True) -> "RunConfig":
        cfg = cls.from_dict(json.loads(Path(path).read_text())) if path else cls()
        if env and os.environ.get(SEED_ENV):
            cfg.seed = int(os.environ[SEED_ENV])
        return cfg


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ValueError(f"{where}: expected an object, got {type(d).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"{where}: unknown keys {sorted(unknown)}")
    kw = {}
    for name, value in d.items():
        hint = hints[name]
        if is_dataclass(hint):
            kw[name] = _build(hint, value, f"{where}.{name}")
        elif hint is tuple and isinstance(value, list):
            kw[name] = tuple(value)
        else:
            kw[name] = value
    return cls(**kw)
