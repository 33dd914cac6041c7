"""Training loop over synthetic (or pre-generated) scenes.

Every random draw of step ``k`` comes from ``numpy.random.default_rng([seed, k])``,
so a run resumed from a checkpoint replays exactly the batches the
uninterrupted run would have seen.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .codec import CodecSpec, encode_chunk, patchify
from .conditioning import (
    VIDEO_FPS,
    ConditioningSet,
    TextEmbedding,
    check_reference_outside,
    crop_audio_to_scene,
    embed_text,
    encode_reference_image,
    reference_time_position,
    resample_audio_features,
    sample_reference_frame,
)
from .config import RunConfig
from .curation.captions import assemble_caption
from .flow_matching import condition_dropout, fm_loss, linear_quadratic_schedule, make_optimizer, sample_training_times
from .mmdit import MirageDiT, NonFiniteError
from .synthetic import SyntheticScene, load_dataset, make_synthetic_dataset

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainingClip:
    x1: np.ndarray  # [N, token_dim] latent tokens of the loss window
    audio: np.ndarray  # [window_frames, 1024]
    text: TextEmbedding
    pixels: np.ndarray  # whole clip, reference frames come from here
    window_start: int
    window_len: int


def prepare_clip(scene: SyntheticScene, cfg: RunConfig, window_start: int = 0) -> TrainingClip:
    wl = cfg.data.window_frames
    window = scene.pixels[window_start:window_start + wl]
    x1, _ = patchify(encode_chunk(window, cfg.codec), cfg.codec.patch_size)
    frames = scene.pixels.shape[0]
    audio = resample_audio_features(scene.audio, VIDEO_FPS, frames)
    audio = crop_audio_to_scene(audio, window_start, window_start + wl)
    text = embed_text(assemble_caption(scene.caption), cfg.model.d_text)
    return TrainingClip(x1, audio, text, scene.pixels, window_start, wl)


def reference_conditioning(clip: TrainingClip, ref_frame: int, codec: CodecSpec) -> ConditioningSet:
    check_reference_outside(ref_frame, clip.window_start, clip.window_len)
    return ConditioningSet(
        ref=encode_reference_image(clip.pixels[ref_frame], codec),
        ref_time=reference_time_position(ref_frame, clip.window_start, codec.temporal_factor),
        audio=clip.audio,
        text=clip.text,
    )


def build_batch(clips: Sequence[TrainingClip], cfg: RunConfig, ladder: np.ndarray, rng: np.random.Generator,
                dtype=torch.float32):
    """``(x0, x1, conds, t)`` with ``repeats`` draws per clip."""
    x1, conds = [], []
    for clip in clips:
        for _ in range(cfg.optimizer.repeats):
            ref = sample_reference_frame(clip.pixels.shape[0], clip.window_start, clip.window_len, rng)
            conds.append(condition_dropout(reference_conditioning(clip, ref, cfg.codec), cfg.dropout, rng))
            x1.append(clip.x1)
    x1 = np.stack(x1)
    x0 = rng.standard_normal(x1.shape)
    t = sample_training_times(ladder, len(conds), rng)
    as_t = lambda a: torch.as_tensor(a, dtype=dtype)
    return as_t(x0), as_t(x1), conds, as_t(t)


def load_scenes(cfg: RunConfig) -> list[SyntheticScene]:
    d = cfg.data
    if d.path:
        return load_dataset(d.path)
    return make_synthetic_dataset(d.n_scenes, cfg.seed, d.coupling, frames=d.total_frames, height=d.height,
                                  width=d.width, channels=cfg.codec.pixel_channels, audio_rate=d.audio_rate)


def build_model(cfg: RunConfig) -> MirageDiT:
    torch.manual_seed(cfg.seed)
    return MirageDiT(cfg.model_config(), cfg.codec.patch_size)


@dataclass
class TrainResult:
    model: MirageDiT
    losses: list
    checkpoint: Optional[Path]
    clips: list


def train(cfg: RunConfig, out_dir=None, resume: bool = False, steps: Optional[int] = None) -> TrainResult:
    """Run ``cfg.optimizer.steps`` AdamW steps (or up to ``steps``) on the fixed clip set."""
    total = cfg.optimizer.steps if steps is None else steps
    clips = [prepare_clip(s, cfg) for s in load_scenes(cfg)]
    model = build_model(cfg)
    opt = make_optimizer(model.parameters(), cfg.optimizer.lr, cfg.optimizer.betas, cfg.optimizer.weight_decay)
    ladder = linear_quadratic_schedule(cfg.schedule)
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / "checkpoint" if out is not None else None
    metrics_path = out / "metrics.jsonl" if out is not None else None

    start = 0
    if resume:
        if ckpt is None or not (ckpt / "manifest.json").exists():
            raise FileNotFoundError("nothing to resume from")
        start = int(load_checkpoint(ckpt, model, opt)["step"])
        if metrics_path.exists():
            # drop steps logged after the checkpoint; they are about to be replayed
            kept = [m for m in read_metrics(metrics_path) if m["step"] <= start]
            metrics_path.write_text("".join(json.dumps(m) + "\n" for m in kept))
    elif out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path.write_text("")
        cfg.dump(out / "config.json")

    losses = []
    for step in range(start, total):
        rng = np.random.default_rng([cfg.seed, step])
        x0, x1, conds, t = build_batch(clips, cfg, ladder, rng, model.dtype)
        opt.zero_grad(set_to_none=True)
        try:
            loss = fm_loss(model, x0, x1, conds, t)
        except NonFiniteError as exc:
            raise TrainingAborted(f"step {step + 1}: {exc}; last good checkpoint kept") from exc
        if not torch.isfinite(loss):
            raise TrainingAborted(f"step {step + 1}: non-finite loss; last good checkpoint kept")
        loss.backward()
        opt.step()
        value = float(loss.detach())
        losses.append(value)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps({"step": step + 1, "loss": value}) + "\n")
        log.debug("step %d loss %.6f", step + 1, value)
        done = step + 1
        if ckpt is not None and (done % cfg.optimizer.checkpoint_every == 0 or done == total):
            save_checkpoint(ckpt, model, opt, cfg.to_dict(), done)
    return TrainResult(model, losses, ckpt, clips)


def load_trained(path) -> tuple[MirageDiT, RunConfig, dict]:
    """Rebuild the model described by a checkpoint's stored config and load its weights."""
    manifest = read_manifest(path)
    cfg = RunConfig.from_dict(manifest["config"])
    model = MirageDiT(cfg.model_config(), cfg.codec.patch_size)
    load_checkpoint(path, model)
    return model, cfg, manifest


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
