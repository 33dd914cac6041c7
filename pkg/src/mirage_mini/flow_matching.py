"""Rectified-flow training pieces.

Convention: data sits at ``t = 0`` and noise at ``t = 1``::

    x_t = (1 - t) * x1 + t * x0        target velocity  v = x1 - x0

so integrating from noise toward data walks ``t`` downward.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .conditioning import ConditioningSet
from .mmdit import MirageDiT, NonFiniteError


@dataclass(frozen=True)
class ScheduleSpec:
    steps: int = 64
    linear_fraction: float = 0.5
    linear_extent: float = 0.5

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 < self.linear_extent < 1.0:
            raise ValueError("linear_extent must lie in (0, 1)")
        if self.steps >= 2 and not 1 <= self.linear_steps < self.steps:
            raise ValueError(f"linear_fraction {self.linear_fraction} gives m={self.linear_steps}, need 1 <= m < {self.steps}")

    @property
    def linear_steps(self) -> int:
        return int(round(self.linear_fraction * self.steps))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DropoutSpec:
    ref: float = 0.1
    text: float = 0.1
    audio: float = 0.1

    def __post_init__(self):
        for name, rate in asdict(self).items():
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"{name} dropout rate {rate} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def interpolate(x0, x1, t):
    _check_shapes(x0, x1)
    t_arr = torch.as_tensor(t) if isinstance(x0, torch.Tensor) else np.asarray(t)
    if (t_arr < 0).any() or (t_arr > 1).any():
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if t_arr.ndim:
        t_arr = t_arr.reshape(-1, *([1] * (x0.ndim - 1)))
        if isinstance(x0, torch.Tensor):
            t_arr = t_arr.to(x0.dtype)
    return (1 - t_arr) * x1 + t_arr * x0


def velocity_target(x0, x1):
    _check_shapes(x0, x1)
    return x1 - x0


def linear_quadratic_schedule(spec: ScheduleSpec) -> np.ndarray:
    """Ladder ``t_0 = 1 > t_1 > ... > t_K = 0``.

    The first ``m`` steps descend linearly to ``1 - c``; the rest follow
    ``(1 - c) * (1 - u**2)`` with ``u`` running from 0 to 1. A single-step
    schedule is just ``[1, 0]``.
    """
    k = spec.steps
    if k == 1:
        return np.array([1.0, 0.0])
    m, c = spec.linear_steps, spec.linear_extent
    i = np.arange(k + 1, dtype=np.float64)
    lin = 1.0 - c * i / m
    quad = (1.0 - c) * (1.0 - ((i - m) / (k - m)) ** 2)
    return np.where(i <= m, lin, quad)


def sample_training_times(ladder: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` flow times uniformly from the ladder points the sampler evaluates (all but ``t_K = 0``)."""
    return ladder[:-1][rng.integers(0, len(ladder) - 1, size=n)]


def condition_dropout(conds: ConditioningSet, spec: DropoutSpec, rng: np.random.Generator) -> ConditioningSet:
    # always draw three numbers so the stream of draws does not depend on which entries are present
    u = rng.random(3)
    out = conds
    if u[0] < spec.ref:
        out = out.replace(ref=None, ref_time=0.0)
    if u[1] < spec.text:
        out = out.replace(text=None)
    if u[2] < spec.audio:
        out = out.replace(audio=None)
    return out


def fm_loss(model: Callable, x0: torch.Tensor, x1: torch.Tensor, conds, t) -> torch.Tensor:
    """Mean squared velocity error over batch and token dims."""
    _check_shapes(x0, x1)
    t = torch.as_tensor(t, dtype=x0.dtype).reshape(-1).expand(x0.shape[0])
    xt = interpolate(x0, x1, t)
    pred = model(xt, conds, t)
    if not torch.isfinite(pred).all():
        if isinstance(model, MirageDiT):
            with torch.no_grad():
                model(xt, conds, t, check_finite=True)
        raise NonFiniteError(-1, "non-finite velocity prediction")
    return (pred - velocity_target(x0, x1)).pow(2).mean()


def make_optimizer(params, lr: float = 1e-3, betas=(0.9, 0.95), weight_decay: float = 0.01):
    return torch.optim.AdamW(params, lr=lr, betas=tuple(betas), weight_decay=weight_decay)
