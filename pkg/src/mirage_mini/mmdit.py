"""Asymmetric multimodal DiT.

Four token streams, ``[ref, text, audio, video]``, are concatenated along the
sequence axis for one joint softmax attention per block. Everything else is
modality specific: adaLN-Zero modulation, q/k/v/out projections, the MLP and
a learnable rotary position table. Reference-image tokens reuse the video
weights (both are imagery) and differ only through their time coordinate.

Rotary channel pairs are split across the (t, h, w) axes in proportion
1/2 : 1/4 : 1/4 of the head-dim pairs; text and audio carry positions on the
time axis only.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import CodecSpec, latent_frame_count, patch_positions, patchify
from .conditioning import AUDIO_DIM, REF_FRAMES, TEXT_LEN, VIDEO_FPS, ConditioningSet, project_audio
from .streams import MODALITIES, PARAM_GROUP, PARAM_GROUPS, ModalityStream

AttentionFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


class NonFiniteError(FloatingPointError):
    def __init__(self, block_index: int, message: str = ""):
        self.block_index = block_index
        super().__init__(message or f"non-finite activations after block {block_index}")


@dataclass
class ModelConfig:
    d_model: int = 128
    heads: int = 4
    depth: int = 2
    mlp_ratio: int = 4
    d_text: int = 64
    audio_dim: int = AUDIO_DIM
    token_dim: int = 96
    video_grid: tuple = (3, 2, 2)
    ref_grid: tuple = (2, 2, 2)
    audio_len: int = 13
    text_len: int = TEXT_LEN
    rope_theta: float = 10000.0
    dtype: str = "float32"

    def __post_init__(self):
        self.video_grid = tuple(int(v) for v in self.video_grid)
        self.ref_grid = tuple(int(v) for v in self.ref_grid)
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.head_dim % 2:
            raise ValueError(f"head dim {self.head_dim} must be even for rotary pairs")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def video_len(self) -> int:
        return int(np.prod(self.video_grid))

    @property
    def ref_len(self) -> int:
        return int(np.prod(self.ref_grid))

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["video_grid"] = list(self.video_grid)
        d["ref_grid"] = list(self.ref_grid)
        return d

    @classmethod
    def for_clip(cls, codec: CodecSpec, frames: int, height: int, width: int, **kw) -> "ModelConfig":
        """Derive token layout for a single-chunk clip of ``frames`` pixel frames."""
        fs, p = codec.spatial_factor, codec.patch_size
        gh, gw = height // fs // p, width // fs // p
        return cls(
            token_dim=codec.token_dim,
            video_grid=(latent_frame_count(frames, codec.temporal_factor), gh, gw),
            ref_grid=(latent_frame_count(REF_FRAMES, codec.temporal_factor), gh, gw),
            audio_len=frames,
            **kw,
        )


def rope_axis_split(head_dim: int) -> tuple[int, int, int]:
    """Number of rotary pairs assigned to the (t, h, w) axes."""
    pairs = head_dim // 2
    n_t = pairs // 2
    n_h = (pairs - n_t) // 2
    return n_t, n_h, pairs - n_t - n_h


class LearnableRoPE(nn.Module):
    """One positive learnable frequency per channel pair; pairs are tied to one axis each."""

    def __init__(self, head_dim: int, theta: float = 10000.0):
        super().__init__()
        if head_dim % 2:
            raise ValueError(f"rotary head dim must be even, got {head_dim}")
        split = rope_axis_split(head_dim)
        log_freqs, axes = [], []
        for axis, n in enumerate(split):
            if n:
                log_freqs.append(-math.log(theta) * torch.arange(n, dtype=torch.float64) / n)
                axes.append(torch.full((n,), axis, dtype=torch.long))
        self.log_freqs = nn.Parameter(torch.cat(log_freqs).float())
        self.register_buffer("axis_index", torch.cat(axes), persistent=False)

    @property
    def freqs(self) -> torch.Tensor:
        return self.log_freqs.exp()

    def forward(self, x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        return apply_rope(x, positions, self.freqs, self.axis_index)


def apply_rope(x: torch.Tensor, positions: torch.Tensor, freqs: torch.Tensor,
               axis_index: torch.Tensor) -> torch.Tensor:
    """Rotate interleaved channel pairs of ``x[..., n, heads, d_head]``.

    ``positions`` is ``[..., n, 3]``; pair ``i`` turns by ``positions[axis_index[i]] * freqs[i]``.
    """
    d_head = x.shape[-1]
    if d_head % 2:
        raise ValueError(f"rotary head dim must be even, got {d_head}")
    angles = positions[..., axis_index].to(x.dtype) * freqs.to(x.dtype)  # [..., n, pairs]
    cos = angles.cos().unsqueeze(-2)
    sin = angles.sin().unsqueeze(-2)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return out.flatten(-2)


def dense_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                    return_weights: bool = False):
    """Softmax attention on ``[..., seq, heads, d_head]`` tensors."""
    qh, kh, vh = (z.transpose(-3, -2) for z in (q, k, v))
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(q.shape[-1])
    weights = scores.softmax(dim=-1)
    out = (weights @ vh).transpose(-3, -2)
    return (out, weights) if return_weights else out


def rms_norm(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)


class ModalityBranch(nn.Module):
    """Per-modality weights of one block."""

    def __init__(self, d_model: int, heads: int, mlp_ratio: int, theta: float):
        super().__init__()
        self.heads = heads
        self.adaln = nn.Linear(d_model, 6 * d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)
        self.mlp_in = nn.Linear(d_model, mlp_ratio * d_model)
        self.mlp_out = nn.Linear(mlp_ratio * d_model, d_model)
        self.rope = LearnableRoPE(d_model // heads, theta)
        self.reset_adaln()

    def reset_adaln(self):
        d = self.out.in_features
        nn.init.normal_(self.adaln.weight, std=0.02)
        nn.init.zeros_(self.adaln.bias)
        with torch.no_grad():
            # rows are (scale_a, bias_a, gate_a, scale_m, bias_m, gate_m)
            self.adaln.weight[2 * d:3 * d].zero_()
            self.adaln.weight[5 * d:6 * d].zero_()

    def modulation(self, c: torch.Tensor):
        return self.adaln(F.silu(c)).chunk(6, dim=-1)

    def mlp(self, x: torch.Tensor) -> torch.Tensor:
        return self.mlp_out(F.gelu(self.mlp_in(x), approximate="tanh"))


def adaln_parameters(t_emb: torch.Tensor, block: "MirageBlock", modality: str):
    """(scale_a, bias_a, gate_a, scale_m, bias_m, gate_m) for ``modality`` in ``block``."""
    return block.branch(modality).modulation(t_emb)


class MirageBlock(nn.Module):
    def __init__(self, d_model: int, heads: int, mlp_ratio: int = 4, theta: float = 10000.0):
        super().__init__()
        self.heads = heads
        self.branches = nn.ModuleDict(
            {g: ModalityBranch(d_model, heads, mlp_ratio, theta) for g in PARAM_GROUPS}
        )

    def branch(self, modality: str) -> ModalityBranch:
        return self.branches[PARAM_GROUP.get(modality, modality)]

    def forward(self, streams: Sequence[ModalityStream], c: torch.Tensor,
                attention: AttentionFn = dense_attention,
                cache: Optional[dict] = None, reuse_attention: bool = False) -> list[ModalityStream]:
        d = streams[0].tokens.shape[-1]
        if any(s.tokens.shape[-1] != d for s in streams):
            raise ValueError("all streams must share d_model")
        mods = {}
        for s in streams:
            mods[s.modality] = [m.unsqueeze(-2) for m in self.branch(s.modality).modulation(c)]

        if reuse_attention and cache is not None and "attn" in cache:
            attn_out = cache["attn"]
        else:
            qs, ks, vs, lens = [], [], [], []
            for s in streams:
                br = self.branch(s.modality)
                scale_a, bias_a = mods[s.modality][0], mods[s.modality][1]
                h = rms_norm(s.tokens) * (1 + scale_a) + bias_a
                q, k, v = br.qkv(h).unflatten(-1, (3, self.heads, -1)).unbind(-3)
                qs.append(br.rope(q, s.positions))
                ks.append(br.rope(k, s.positions))
                vs.append(v)
                lens.append(s.tokens.shape[-2])
            joint = attention(torch.cat(qs, -3), torch.cat(ks, -3), torch.cat(vs, -3))
            parts = joint.flatten(-2).split(lens, dim=-2)
            attn_out = [self.branch(s.modality).out(p) for s, p in zip(streams, parts)]
            if cache is not None:
                cache["attn"] = attn_out

        new = []
        for s, a in zip(streams, attn_out):
            br = self.branch(s.modality)
            _, _, gate_a, scale_m, bias_m, gate_m = mods[s.modality]
            x = s.tokens + gate_a * a
            x = x + gate_m * br.mlp(rms_norm(x) * (1 + scale_m) + bias_m)
            new.append(s.with_tokens(x))
        return new


def timestep_embedding(t: torch.Tensor, dim: int = 256, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


@dataclass
class CondBatch:
    """Collated conditioning: absent entries are zero-filled and flagged in ``*_present``."""

    ref: torch.Tensor  # [B, n_ref, token_dim]
    ref_time: torch.Tensor  # [B]
    ref_present: torch.Tensor  # [B] bool
    audio: torch.Tensor  # [B, m, audio_dim]
    audio_present: torch.Tensor
    text: torch.Tensor  # [B, 256, d_text]
    text_valid: torch.Tensor  # [B] long
    text_present: torch.Tensor

    @property
    def batch_size(self) -> int:
        return self.ref.shape[0]


def collate_conditions(conds: Sequence[ConditioningSet], cfg: ModelConfig, patch_size: int,
                       dtype: torch.dtype) -> CondBatch:
    b = len(conds)
    ref = np.zeros((b, cfg.ref_len, cfg.token_dim))
    audio = np.zeros((b, cfg.audio_len, cfg.audio_dim))
    text = np.zeros((b, cfg.text_len, cfg.d_text))
    ref_time = np.zeros(b)
    valid = np.zeros(b, dtype=np.int64)
    flags = np.zeros((3, b), dtype=bool)
    for i, c in enumerate(conds):
        if c.ref is not None:
            tokens, _ = patchify(c.ref, patch_size)
            if tokens.shape != ref.shape[1:]:
                raise ValueError(f"reference tokens {tokens.shape} do not match layout {ref.shape[1:]}")
            ref[i], flags[0, i] = tokens, True
        ref_time[i] = c.ref_time
        if c.audio is not None:
            if c.audio.shape != audio.shape[1:]:
                raise ValueError(f"audio features {c.audio.shape} do not match layout {audio.shape[1:]}")
            audio[i], flags[1, i] = c.audio, True
        if c.text is not None:
            if c.text.values.shape != text.shape[1:]:
                raise ValueError(f"text embedding {c.text.values.shape} does not match {text.shape[1:]}")
            text[i], valid[i], flags[2, i] = c.text.values, c.text.valid_len, True
    as_t = lambda a: torch.as_tensor(a, dtype=dtype)
    return CondBatch(as_t(ref), as_t(ref_time), torch.as_tensor(flags[0]), as_t(audio),
                     torch.as_tensor(flags[1]), as_t(text), torch.as_tensor(valid), torch.as_tensor(flags[2]))


class MirageDiT(nn.Module):
    def __init__(self, cfg: ModelConfig, patch_size: int = 2):
        super().__init__()
        self.cfg = cfg
        self.patch_size = patch_size
        d = cfg.d_model
        self.video_in = nn.Linear(cfg.token_dim, d)
        self.text_in = nn.Linear(cfg.d_text, d)
        self.audio_proj = nn.Parameter(torch.randn(cfg.audio_dim, d) / math.sqrt(cfg.audio_dim))
        self.null = nn.ParameterDict({m: nn.Parameter(0.02 * torch.randn(d)) for m in ("ref", "text", "audio")})
        self.t_embed = nn.Sequential(nn.Linear(256, d), nn.SiLU(), nn.Linear(d, d))
        self.text_pool = nn.Linear(d, d)
        self.blocks = nn.ModuleList(
            [MirageBlock(d, cfg.heads, cfg.mlp_ratio, cfg.rope_theta) for _ in range(cfg.depth)]
        )
        self.final_adaln = nn.Linear(d, 2 * d)
        self.head = nn.Linear(d, cfg.token_dim)
        for lin in (self.final_adaln, self.head):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
        self.attention: AttentionFn = dense_attention
        self.to(cfg.torch_dtype)
        self.register_buffer("video_positions", torch.as_tensor(patch_positions(cfg.video_grid), dtype=cfg.torch_dtype),
                             persistent=False)
        ref_pos = torch.as_tensor(patch_positions(cfg.ref_grid), dtype=cfg.torch_dtype)
        self.register_buffer("ref_positions", ref_pos, persistent=False)

    @property
    def dtype(self) -> torch.dtype:
        return self.video_in.weight.dtype

    def collate(self, conds) -> CondBatch:
        if isinstance(conds, CondBatch):
            return conds
        if isinstance(conds, ConditioningSet):
            conds = [conds]
        return collate_conditions(conds, self.cfg, self.patch_size, self.dtype)

    def conditioning_vector(self, t: torch.Tensor, text_stream: ModalityStream, cb: CondBatch) -> torch.Tensor:
        """Timestep embedding plus a projection of the pooled text tokens."""
        idx = torch.arange(self.cfg.text_len)
        valid = torch.where(cb.text_present, cb.text_valid, torch.full_like(cb.text_valid, self.cfg.text_len))
        mask = (idx[None] < valid[:, None]).to(self.dtype)
        pooled = (text_stream.tokens * mask[..., None]).sum(-2) / mask.sum(-1, keepdim=True).clamp(min=1)
        return self.t_embed(timestep_embedding(t, 256).to(self.dtype)) + self.text_pool(pooled)

    def embed(self, x: torch.Tensor, cb: CondBatch) -> list[ModalityStream]:
        """Input projections; absent modalities become their learned null token."""
        b = x.shape[0]
        pick = lambda present, tokens, null: torch.where(present[:, None, None], tokens, null.expand_as(tokens))

        ref_tok = pick(cb.ref_present, self.video_in(cb.ref), self.null["ref"])
        ref_pos = self.ref_positions.expand(b, -1, -1).clone()
        ref_pos[..., 0] = cb.ref_time[:, None]

        text_tok = pick(cb.text_present, self.text_in(cb.text), self.null["text"])
        line = torch.zeros(self.cfg.text_len, 3, dtype=self.dtype)
        line[:, 0] = torch.arange(self.cfg.text_len, dtype=self.dtype)

        audio = project_audio(cb.audio, self.audio_proj)
        audio_tok = pick(cb.audio_present, audio.tokens, self.null["audio"])

        return [
            ModalityStream("ref", ref_tok, ref_pos),
            ModalityStream("text", text_tok, line.expand(b, -1, -1)),
            ModalityStream("audio", audio_tok, audio.positions.expand(b, -1, -1)),
            ModalityStream("video", self.video_in(x), self.video_positions.expand(b, -1, -1)),
        ]

    def run_blocks(self, streams, c, skip_blocks=(), caches=None, reuse_attention=False,
                   check_finite=False) -> list[ModalityStream]:
        for i, block in enumerate(self.blocks):
            if i in skip_blocks:
                continue
            cache = None if caches is None else caches[i]
            streams = block(streams, c, self.attention, cache, reuse_attention)
            if check_finite and not all(torch.isfinite(s.tokens).all() for s in streams):
                raise NonFiniteError(i)
        return streams

    def final_layer(self, video: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift, scale = self.final_adaln(F.silu(c)).unsqueeze(-2).chunk(2, dim=-1)
        return self.head(rms_norm(video) * (1 + scale) + shift)

    def forward(self, x: torch.Tensor, conds, t, skip_blocks=(), caches=None,
                reuse_attention: bool = False, check_finite: bool = False) -> torch.Tensor:
        """Velocity for video tokens ``x`` of shape ``[B, N, token_dim]``."""
        x = torch.as_tensor(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[1:] != (self.cfg.video_len, self.cfg.token_dim):
            raise ValueError(f"video tokens {tuple(x.shape)} do not match [B, {self.cfg.video_len}, {self.cfg.token_dim}]")
        for i in skip_blocks:
            if not 0 <= i < len(self.blocks):
                raise IndexError(f"skip block index {i} out of range for depth {len(self.blocks)}")
        cb = self.collate(conds)
        if cb.batch_size != x.shape[0]:
            raise ValueError(f"{cb.batch_size} conditioning sets for a batch of {x.shape[0]}")
        t = torch.as_tensor(t, dtype=self.dtype).reshape(-1).expand(x.shape[0])
        if ((t < 0) | (t > 1)).any():
            raise ValueError("flow time must lie in [0, 1]")
        streams = self.embed(x, cb)
        c = self.conditioning_vector(t, streams[1], cb)
        streams = self.run_blocks(streams, c, skip_blocks, caches, reuse_attention, check_finite)
        out = self.final_layer(streams[-1].tokens, c)
        if check_finite and not torch.isfinite(out).all():
            raise NonFiniteError(len(self.blocks), "non-finite output from the velocity head")
        return out


def model_forward(video_tokens, conds, t, model: MirageDiT, **kw) -> torch.Tensor:
    return model(video_tokens, conds, t, **kw)
