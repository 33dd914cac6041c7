"""Single-speaker scene extraction and chunking (times in seconds, half-open)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

MIN_SCENE_SECONDS = 2.0
CHUNK_SECONDS = 10.0


@dataclass(frozen=True, order=True)
class SceneRange:
    start: float
    end: float

    def __post_init__(self):
        if not self.end > self.start:
            raise ValueError(f"scene end {self.end} must exceed start {self.start}")

    @property
    def length(self) -> float:
        return self.end - self.start


def _check_sorted(ranges: Sequence[SceneRange], name: str):
    for a, b in zip(ranges, ranges[1:]):
        if b.start < a.end:
            raise ValueError(f"{name} must be sorted and non-overlapping: {a} then {b}")


def extract_single_speaker_scenes(face_ranges: Sequence[SceneRange], scene_bounds: Sequence[SceneRange],
                                  min_length: float = MIN_SCENE_SECONDS) -> list[SceneRange]:
    """Intersect single-face ranges with detected scenes; drop pieces shorter than ``min_length``."""
    _check_sorted(face_ranges, "face ranges")
    _check_sorted(scene_bounds, "scene bounds")
    out, i, j = [], 0, 0
    while i < len(face_ranges) and j < len(scene_bounds):
        a, b = face_ranges[i], scene_bounds[j]
        lo, hi = max(a.start, b.start), min(a.end, b.end)
        if hi - lo >= min_length:
            out.append(SceneRange(lo, hi))
        if a.end <= b.end:
            i += 1
        else:
            j += 1
    return out


def chunk_scene(scene: SceneRange, chunk: float = CHUNK_SECONDS,
                min_length: float = MIN_SCENE_SECONDS) -> list[SceneRange]:
    """Consecutive ``chunk``-second pieces from the scene start; a tail shorter than ``min_length`` is dropped."""
    if scene.length < min_length:
        raise ValueError(f"scene of {scene.length} s is shorter than {min_length} s")
    out, start = [], scene.start
    while scene.end - start >= chunk:
        out.append(SceneRange(start, start + chunk))
        start += chunk
    if scene.end - start >= min_length:
        out.append(SceneRange(start, scene.end))
    return out


def sample_training_segment(clip_len: float, rng: np.random.Generator, seg_len: float = CHUNK_SECONDS) -> SceneRange:
    if clip_len <= 0 or seg_len <= 0:
        raise ValueError("clip and segment lengths must be positive")
    if clip_len <= seg_len:
        return SceneRange(0.0, clip_len)
    start = float(rng.uniform(0.0, clip_len - seg_len))
    return SceneRange(start, start + seg_len)
