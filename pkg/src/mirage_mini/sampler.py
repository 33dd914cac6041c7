"""Guided Euler sampling with inference-time caching.

Guidance per step ``i`` with flow times ``t_i > t_{i+1}``::

    w = cosine_cfg_scale(i, K, cfg_hi, cfg_lo)
    v = (1 - w) * v_uncond + w * v_cond + stg_weight * (v_cond - v_skip)
    x <- x + (t_i - t_{i+1}) * v

Two caches, both off unless ``CachePolicy.enabled``:

* from step ``uncond_reuse_after`` on, the unconditional branch is not run;
  ``v_uncond`` is rebuilt as ``v_cond - r`` with ``r`` the last measured
  ``v_cond - v_uncond``;
* on steps with ``i % attn_reuse_stride != 0`` every block reuses the attention
  output it produced for the same branch at the last full step.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .conditioning import ConditioningSet, TextEmbedding
from .mmdit import MirageDiT


@dataclass
class CachePolicy:
    enabled: bool = False
    uncond_reuse_after: Optional[int] = None  # None -> K // 4
    attn_reuse_stride: int = 2

    def resolve(self, steps: int) -> int:
        after = steps // 4 if self.uncond_reuse_after is None else self.uncond_reuse_after
        if self.enabled and not 0 <= after < steps:
            raise ValueError(f"uncond_reuse_after={after} must reference a step in [0, {steps})")
        if self.attn_reuse_stride < 1:
            raise ValueError("attn_reuse_stride must be >= 1")
        return after


@dataclass
class GuidanceConfig:
    cfg_hi: float = 2.0
    cfg_lo: float = 1.0
    stg_weight: float = 0.0
    stg_skip_layers: tuple = ()
    negative_text: Optional[TextEmbedding] = None
    cache: CachePolicy = field(default_factory=CachePolicy)

    def __post_init__(self):
        if not self.cfg_hi >= self.cfg_lo >= 0:
            raise ValueError(f"need cfg_hi >= cfg_lo >= 0, got {self.cfg_hi}, {self.cfg_lo}")
        self.stg_skip_layers = tuple(int(i) for i in self.stg_skip_layers)
        if isinstance(self.cache, dict):
            self.cache = CachePolicy(**self.cache)

    def validate_depth(self, depth: int):
        bad = [i for i in self.stg_skip_layers if not 0 <= i < depth]
        if bad:
            raise ValueError(f"STG skip layers {bad} out of range for depth {depth}")


def euler_step(x, v, t: float, t_next: float):
    if not t > t_next:
        raise ValueError(f"Euler step must descend in t, got {t} -> {t_next}")
    return x + (t - t_next) * v


def cfg_combine(v_cond, v_uncond, w: float):
    if v_cond.shape != v_uncond.shape:
        raise ValueError(f"shape mismatch: {tuple(v_cond.shape)} vs {tuple(v_uncond.shape)}")
    return (1 - w) * v_uncond + w * v_cond


def cosine_cfg_scale(i: int, steps: int, cfg_hi: float, cfg_lo: float) -> float:
    if steps < 2:
        raise ValueError("cosine annealing needs at least 2 steps")
    if not 0 <= i < steps:
        raise ValueError(f"step {i} outside [0, {steps})")
    return cfg_lo + (cfg_hi - cfg_lo) * (1 + math.cos(math.pi * i / (steps - 1))) / 2


def skip_layer_forward(model: MirageDiT, x, conds, t, skip_set) -> torch.Tensor:
    """Forward pass with every block in ``skip_set`` bypassed."""
    return model(x, conds, t, skip_blocks=frozenset(skip_set))


def unconditional_set(g: GuidanceConfig) -> ConditioningSet:
    return ConditioningSet(text=g.negative_text) if g.negative_text is not None else ConditioningSet.null()


def step_scale(i: int, steps: int, g: GuidanceConfig) -> float:
    return g.cfg_hi if steps < 2 else cosine_cfg_scale(i, steps, g.cfg_hi, g.cfg_lo)


def guided_velocity(model: MirageDiT, x, conds, t, g: GuidanceConfig, i: int, steps: int) -> torch.Tensor:
    """Uncached CFG + STG velocity at step ``i`` of ``steps``."""
    b = x.shape[0]
    v_cond = model(x, conds, t)
    v_uncond = model(x, [unconditional_set(g)] * b, t)
    v = cfg_combine(v_cond, v_uncond, step_scale(i, steps, g))
    if g.stg_weight:
        v = v + g.stg_weight * (v_cond - skip_layer_forward(model, x, conds, t, g.stg_skip_layers))
    return v


@dataclass
class SampleResult:
    tokens: torch.Tensor
    accounting: dict
    trajectory: list = field(default_factory=list)


def initial_noise(shape, seed: int, dtype=torch.float32) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(*shape, generator=gen, dtype=torch.float64).to(dtype)


@torch.no_grad()
def cached_sample(model: MirageDiT, conds: Sequence[ConditioningSet], ladder, g: GuidanceConfig,
                  noise: Optional[torch.Tensor] = None, seed: int = 0,
                  keep_trajectory: bool = False) -> SampleResult:
    """Integrate from noise (t=1) to data (t=0) along ``ladder``."""
    ladder = np.asarray(ladder, dtype=np.float64)
    steps = len(ladder) - 1
    g.validate_depth(len(model.blocks))
    reuse_after = g.cache.resolve(steps)
    conds = [conds] if isinstance(conds, ConditioningSet) else list(conds)
    b = len(conds)
    if noise is None:
        noise = initial_noise((b, model.cfg.video_len, model.cfg.token_dim), seed, model.dtype)
    x = noise.to(model.dtype)

    cond_batch = model.collate(conds)
    uncond_batch = model.collate([unconditional_set(g)] * b)
    use_stg = bool(g.stg_weight)
    enabled = g.cache.enabled
    depth = len(model.blocks)
    caches = {name: [dict() for _ in range(depth)] if enabled else None for name in ("cond", "uncond", "skip")}
    counts = dict(cond=0, uncond=0, skip=0, attn_reused=0, block_attention=0)
    residual = None
    trajectory = [x.clone()] if keep_trajectory else []

    def run(name, batch, t, reuse, skip=()):
        counts[name] += 1
        active = depth - len(set(skip))
        if reuse:
            counts["attn_reused"] += 1
        else:
            counts["block_attention"] += active
        return model(x, batch, t, skip_blocks=frozenset(skip), caches=caches[name], reuse_attention=reuse)

    start = time.perf_counter()
    for i in range(steps):
        t, t_next = float(ladder[i]), float(ladder[i + 1])
        reuse = enabled and g.cache.attn_reuse_stride > 1 and i % g.cache.attn_reuse_stride != 0
        v_cond = run("cond", cond_batch, t, reuse)
        if enabled and i >= reuse_after:
            v_uncond = v_cond - residual
        else:
            v_uncond = run("uncond", uncond_batch, t, reuse)
            if enabled:
                residual = v_cond - v_uncond
        v = cfg_combine(v_cond, v_uncond, step_scale(i, steps, g))
        if use_stg:
            v = v + g.stg_weight * (v_cond - run("skip", cond_batch, t, reuse, g.stg_skip_layers))
        x = euler_step(x, v, t, t_next)
        if keep_trajectory:
            trajectory.append(x.clone())
    elapsed = time.perf_counter() - start

    per_step = 2 + int(use_stg)
    total = counts["cond"] + counts["uncond"] + counts["skip"]
    vanilla = per_step * steps
    accounting = {
        "steps": steps,
        "cache_enabled": enabled,
        "cond_forwards": counts["cond"],
        "uncond_forwards": counts["uncond"],
        "skip_forwards": counts["skip"],
        "total_forwards": total,
        "vanilla_forwards": vanilla,
        "forward_reduction": 1.0 - total / vanilla,
        "attention_reused_forwards": counts["attn_reused"],
        "full_forwards": total - counts["attn_reused"],
        "block_attention_evaluations": counts["block_attention"],
        "wall_time_s": elapsed,
    }
    return SampleResult(x, accounting, trajectory)


def sample(model: MirageDiT, conds, ladder, g: GuidanceConfig, noise=None, seed: int = 0) -> SampleResult:
    """Reference sampler: same loop with caching forced off."""
    plain = GuidanceConfig(g.cfg_hi, g.cfg_lo, g.stg_weight, g.stg_skip_layers, g.negative_text, CachePolicy(False))
    return cached_sample(model, conds, ladder, plain, noise=noise, seed=seed)
