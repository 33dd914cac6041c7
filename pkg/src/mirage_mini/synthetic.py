"""Procedural talking-head scenes for desk-scale training.

Each scene has a static face pattern plus a "mouth" patch whose brightness
follows a per-frame pixel driver. The audio track carries a per-speaker voice
vector plus an audio driver along a shared loudness direction. ``coupling``
mixes the two drivers::

    pixel_driver = coupling * audio_driver + sqrt(1 - coupling**2) * independent
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .conditioning import AUDIO_DIM, VIDEO_FPS, AudioFeatures, load_audio_features, save_audio_features
from .storage import load_array, save_array
from .curation.captions import CaptionRecord, TemplateCaptioner

_SUBJECTS = ["young woman with curly dark hair", "older man with a grey beard", "man with short black hair",
             "woman with a red headscarf", "teenager with freckles", "woman with silver glasses"]
_CLOTHING = ["a grey knitted cardigan", "a navy suit", "a green hoodie", "a white blouse", "a denim jacket"]
_MOODS = ["engaged and relaxed", "serious", "cheerful", "thoughtful"]
_BACKGROUNDS = ["a bookshelf with a plant", "a brick wall", "a sunny kitchen", "an office window"]
_FRAMING = ["medium", "close-up", "medium close-up"]

MOUTH = (slice(5, 7), slice(2, 6))


@dataclass
class SyntheticScene:
    pixels: np.ndarray  # [frames, H, W, C]
    audio: AudioFeatures
    caption: CaptionRecord
    coupling: float
    audio_driver: np.ndarray  # [frames]
    pixel_driver: np.ndarray  # [frames]


def _ar1(rng: np.random.Generator, n: int, rho: float = 0.3) -> np.ndarray:
    e = rng.standard_normal(n)
    out = np.empty(n)
    out[0] = e[0]
    for i in range(1, n):
        out[i] = rho * out[i - 1] + np.sqrt(1 - rho**2) * e[i]
    return out


def _loudness_direction() -> np.ndarray:
    u = np.random.default_rng(12345).standard_normal(AUDIO_DIM)
    return u / np.linalg.norm(u) * np.sqrt(AUDIO_DIM) / 4


def make_scene(rng: np.random.Generator, coupling: float, frames: int = 37, height: int = 8, width: int = 8,
               channels: int = 1, audio_rate: float = 50.0) -> SyntheticScene:
    audio_driver = _ar1(rng, frames)
    independent = _ar1(rng, frames)
    pixel_driver = coupling * audio_driver + np.sqrt(1.0 - coupling**2) * independent

    base = 0.6 * np.tanh(rng.standard_normal((height, width, channels)))
    pixels = np.repeat(base[None], frames, axis=0)
    pixels[(slice(None),) + MOUTH] += 0.5 * pixel_driver[:, None, None, None]

    duration = frames / VIDEO_FPS
    n_audio = int(round(audio_rate * duration))
    frame_pos = np.arange(n_audio) / audio_rate * VIDEO_FPS
    loud = np.interp(frame_pos, np.arange(frames), audio_driver)
    voice = 0.5 * rng.standard_normal(AUDIO_DIM)
    feats = voice[None] + loud[:, None] * _loudness_direction()[None]

    pick = lambda xs: xs[rng.integers(len(xs))]
    caption = TemplateCaptioner().describe({
        "subject": pick(_SUBJECTS), "clothing": pick(_CLOTHING), "mood": pick(_MOODS),
        "background": pick(_BACKGROUNDS), "framing": pick(_FRAMING),
    })
    return SyntheticScene(pixels, AudioFeatures(feats, audio_rate, duration), caption, coupling,
                          audio_driver, pixel_driver)


def make_synthetic_dataset(n: int, seed: int, coupling: float = 1.0, **kw) -> list[SyntheticScene]:
    if n < 1:
        raise ValueError("need at least one scene")
    if not 0.0 <= coupling <= 1.0:
        raise ValueError(f"coupling {coupling} outside [0, 1]")
    return [make_scene(np.random.default_rng([seed, i]), coupling, **kw) for i in range(n)]


def save_dataset(scenes: list[SyntheticScene], root) -> Path:
    """One directory per scene: pixels and audio as manifest+blob arrays, caption and drivers as JSON."""
    root = Path(root)
    for i, s in enumerate(scenes):
        d = root / f"scene_{i:04d}"
        save_array(d / "pixels", s.pixels)
        save_audio_features(d / "audio", s.audio)
        (d / "scene.json").write_text(json.dumps({
            "caption": asdict(s.caption), "coupling": s.coupling,
            "audio_driver": s.audio_driver.tolist(), "pixel_driver": s.pixel_driver.tolist(),
        }, indent=1))
    return root


def load_dataset(root) -> list[SyntheticScene]:
    scenes = []
    for d in sorted(p for p in Path(root).iterdir() if p.is_dir()):
        meta = json.loads((d / "scene.json").read_text())
        pixels, _ = load_array(d / "pixels")
        scenes.append(SyntheticScene(pixels, load_audio_features(d / "audio"), CaptionRecord.from_dict(meta["caption"]),
                                     meta["coupling"], np.asarray(meta["audio_driver"]),
                                     np.asarray(meta["pixel_driver"])))
    if not scenes:
        raise FileNotFoundError(f"no scenes under {root}")
    return scenes
