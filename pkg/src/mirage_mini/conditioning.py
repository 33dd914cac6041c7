"""Audio, text and reference-image conditioning.

Audio features come from any external speech encoder (1024-d rows at its own
frame rate). They are linearly resampled onto the video frame clock, cropped to
scene boundaries and projected by a learnable matrix inside the model.

Text goes through a deterministic stand-in embedder: whitespace tokens hash to
ids, ids hash to fixed unit-variance vectors, and the result is padded/capped
to 256 rows.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
import torch

from .codec import CodecSpec, LatentVideo, encode_chunk
from .storage import load_array, save_array
from .streams import ModalityStream

AUDIO_DIM = 1024
TEXT_LEN = 256
VIDEO_FPS = 25.0
REF_FRAMES = 7
VOCAB_SIZE = 32128


class InsufficientFeaturesError(ValueError):
    pass


class ReferenceInWindowError(ValueError):
    """A reference frame was drawn from inside the loss window."""


@dataclass
class AudioFeatures:
    values: np.ndarray  # [n, 1024]
    source_rate: float
    duration: float

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError(f"audio features must be 2-D, got {self.values.shape}")
        expected = round(self.source_rate * self.duration)
        if abs(self.values.shape[0] - expected) > 1:
            raise ValueError(
                f"{self.values.shape[0]} rows inconsistent with {self.source_rate} Hz x {self.duration} s"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("audio features contain non-finite values")


@dataclass
class TextEmbedding:
    values: np.ndarray  # [256, d_text]
    valid_len: int


@dataclass
class ConditioningSet:
    """Per-sample conditioning. ``None`` entries stand for the learned null embedding."""

    ref: Optional[LatentVideo] = None
    ref_time: float = 0.0
    audio: Optional[np.ndarray] = None  # resampled features [m, 1024]
    text: Optional[TextEmbedding] = None

    @classmethod
    def null(cls) -> "ConditioningSet":
        return cls()

    def replace(self, **kw) -> "ConditioningSet":
        d = dict(ref=self.ref, ref_time=self.ref_time, audio=self.audio, text=self.text)
        d.update(kw)
        return ConditioningSet(**d)


def resample_audio_features(feats: AudioFeatures, target_fps: float, frame_count: int) -> np.ndarray:
    """Linear-in-time resampling of each feature channel onto ``i / target_fps``."""
    x = feats.values
    n = x.shape[0]
    if n < 2:
        raise InsufficientFeaturesError(f"need at least 2 feature rows to interpolate, got {n}")
    if target_fps <= 0:
        raise ValueError("target_fps must be positive")
    pos = np.arange(frame_count, dtype=np.float64) / target_fps * feats.source_rate
    pos = np.clip(pos, 0.0, n - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), n - 2)
    frac = (pos - lo)[:, None]
    return (1.0 - frac) * x[lo] + frac * x[lo + 1]


def crop_audio_to_scene(feats: np.ndarray, scene_start: int, scene_end: int) -> np.ndarray:
    if not 0 <= scene_start < scene_end <= feats.shape[0]:
        raise IndexError(f"crop [{scene_start}, {scene_end}) outside [0, {feats.shape[0]})")
    return feats[scene_start:scene_end]


def project_audio(feats: torch.Tensor, proj: torch.Tensor) -> ModalityStream:
    """Project ``[..., m, 1024]`` features; positions run along time only."""
    if feats.shape[-1] != proj.shape[0]:
        raise ValueError(f"feature dim {feats.shape[-1]} does not match projection {tuple(proj.shape)}")
    tokens = feats @ proj
    m = feats.shape[-2]
    positions = torch.zeros(*feats.shape[:-1], 3, dtype=tokens.dtype)
    positions[..., 0] = torch.arange(m, dtype=tokens.dtype)
    return ModalityStream("audio", tokens, positions)


def tokenize(text: str, vocab_size: int = VOCAB_SIZE) -> list[int]:
    """Whitespace tokenizer: each word maps to ``crc32(utf-8 word) mod vocab_size``."""
    return [zlib.crc32(w.encode("utf-8")) % vocab_size for w in text.split()]


@lru_cache(maxsize=65536)
def _token_vector(token_id: int, d_text: int, seed: int) -> np.ndarray:
    vec = np.random.default_rng([seed, int(token_id)]).standard_normal(d_text)
    vec.setflags(write=False)
    return vec


def embed_text_stub(token_ids: Sequence[int], d_text: int = 64, seed: int = 0) -> TextEmbedding:
    ids = list(token_ids)[:TEXT_LEN]
    values = np.zeros((TEXT_LEN, d_text))  # pad vector is zero
    for i, tid in enumerate(ids):
        values[i] = _token_vector(tid, d_text, seed)
    return TextEmbedding(values, len(ids))


def embed_text(text: str, d_text: int = 64, seed: int = 0) -> TextEmbedding:
    return embed_text_stub(tokenize(text), d_text, seed)


def encode_reference_image(img: np.ndarray, spec: CodecSpec) -> LatentVideo:
    """Replicate a still ``[Hp, Wp, Cp]`` image to the codec's 7-frame minimum and encode."""
    img = np.asarray(img)
    if img.ndim != 3:
        raise ValueError(f"reference image must be [Hp, Wp, Cp], got {img.shape}")
    return encode_chunk(np.repeat(img[None], REF_FRAMES, axis=0), spec)


def reference_time_position(ref_frame: int, window_start: int, ft: int) -> float:
    return (ref_frame - window_start) / ft


def check_reference_outside(ref_frame: int, window_start: int, window_len: int) -> None:
    if window_start <= ref_frame < window_start + window_len:
        raise ReferenceInWindowError(
            f"reference frame {ref_frame} lies inside the loss window [{window_start}, {window_start + window_len})"
        )


def sample_reference_frame(total_frames: int, window_start: int, window_len: int,
                           rng: np.random.Generator) -> int:
    """Uniformly draw a frame index from ``[0, total_frames)`` outside the loss window."""
    outside = [f for f in range(total_frames) if not window_start <= f < window_start + window_len]
    if not outside:
        raise ReferenceInWindowError("clip has no frames outside the loss window")
    return int(outside[rng.integers(len(outside))])


def save_audio_features(path, feats: AudioFeatures):
    return save_array(path, feats.values, source_rate=feats.source_rate, duration=feats.duration)


def load_audio_features(path) -> AudioFeatures:
    values, manifest = load_array(path)
    return AudioFeatures(values, float(manifest["source_rate"]), float(manifest["duration"]))
