"""Command line entry point: ``mirage-mini <command> [flags]``.

Seeds: ``--seed`` beats the ``MIRAGE_MINI_SEED`` environment variable, which
beats the ``seed`` field of the config file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .checkpoint import read_manifest
from .codec import decode_latents, save_latents, unpatchify
from .conditioning import (
    VIDEO_FPS,
    ConditioningSet,
    embed_text,
    encode_reference_image,
    load_audio_features,
    reference_time_position,
    resample_audio_features,
)
from .config import SEED_ENV, RunConfig
from .context_parallel import ShardSpec, context_parallel_attention, memory_accounting
from .curation import Thresholds, read_records, run_pipeline
from .flow_matching import ScheduleSpec, linear_quadratic_schedule
from .mmdit import dense_attention
from .sampler import cached_sample
from .storage import load_array, save_array
from .synthetic import make_synthetic_dataset, save_dataset
from .train import load_trained, train

log = logging.getLogger("mirage_mini")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _dump(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")
    else:
        print(text)


def cmd_train(args):
    cfg = _config(args)
    result = train(cfg, args.out, resume=args.resume, steps=args.steps)
    if result.losses:
        print(f"trained to step {cfg.optimizer.steps if args.steps is None else args.steps}: "
              f"loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}")
    print(f"checkpoint: {result.checkpoint}")


def _sample_conditions(args, cfg: RunConfig, model) -> ConditioningSet:
    mc = model.cfg
    audio = None
    if args.audio_features:
        feats = load_audio_features(args.audio_features)
        total = int(np.floor(feats.duration * VIDEO_FPS + 1e-9))
        if total < mc.audio_len:
            raise SystemExit(f"audio covers {total} frames, the sample window needs {mc.audio_len}")
        audio = resample_audio_features(feats, VIDEO_FPS, total)[:mc.audio_len]
    text = embed_text(args.text, mc.d_text) if args.text is not None else None
    ref, ref_time = None, 0.0
    if args.ref_image:
        image, _ = load_array(args.ref_image)
        ref = encode_reference_image(image, cfg.codec)
        frame = cfg.data.window_frames if args.ref_frame is None else args.ref_frame
        ref_time = reference_time_position(frame, 0, cfg.codec.temporal_factor)
    return ConditioningSet(ref=ref, ref_time=ref_time, audio=audio, text=text)


def cmd_sample(args):
    model, cfg, manifest = load_trained(args.checkpoint)
    if args.config:
        override = RunConfig.load(args.config)
        cfg.sampling = override.sampling
    s = cfg.sampling
    for name in ("cfg_hi", "cfg_lo", "stg_weight", "negative_text"):
        if getattr(args, name) is not None:
            setattr(s, name, getattr(args, name))
    if args.stg_layers is not None:
        s.stg_skip_layers = tuple(int(i) for i in args.stg_layers.split(",") if i.strip())
    if args.cache is not None:
        s.cache_enabled = args.cache
    seed = args.seed
    if seed is None:
        seed = int(os.environ[SEED_ENV]) if os.environ.get(SEED_ENV) else cfg.seed

    steps = args.steps or cfg.schedule.steps
    ladder = linear_quadratic_schedule(ScheduleSpec(steps, cfg.schedule.linear_fraction, cfg.schedule.linear_extent))
    conds = _sample_conditions(args, cfg, model)
    guidance = s.guidance(model.cfg.d_text)
    result = cached_sample(model, [conds], ladder, guidance, seed=seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tokens = result.tokens[0].detach().numpy().astype(np.float64)
    latent = unpatchify(tokens, model.cfg.video_grid, cfg.codec.patch_size, cfg.codec.latent_channels)
    save_latents(out / "latents", latent, cfg.codec)
    save_array(out / "pixels", decode_latents(latent, cfg.codec).values)
    report = {
        "checkpoint": str(args.checkpoint),
        "checkpoint_step": manifest.get("step"),
        "seed": seed,
        "guidance": {**asdict(s)},
        "conditions": {"ref": conds.ref is not None, "audio": conds.audio is not None, "text": conds.text is not None},
        "accounting": result.accounting,
    }
    _dump(report, out / "report.json")
    acc = result.accounting
    print(f"{acc['steps']} steps, {acc['total_forwards']}/{acc['vanilla_forwards']} forwards, "
          f"{acc['wall_time_s']:.2f} s -> {out}")


def cmd_curate(args):
    records = read_records(args.records)
    thresholds = Thresholds.load(args.thresholds)
    survivors, report = run_pipeline(records, thresholds)
    if args.out:
        Path(args.out).write_text("".join(r.clip_id + "\n" for r in survivors))
    _dump(report.to_dict(), args.report)
    if args.report:
        counts = " -> ".join(f"{n}:{c}" for n, c in report.stages)
        print(counts)


def _inspect_checkpoint(path: Path) -> dict:
    manifest = read_manifest(path)
    model_tensors = [e for e in manifest["tensors"] if e["name"].startswith("model/")]
    return {
        "kind": "checkpoint",
        "step": manifest.get("step"),
        "tensors": len(manifest["tensors"]),
        "model_parameters": int(sum(np.prod(e["shape"], dtype=np.int64) for e in model_tensors)),
        "has_optimizer_state": any(e["name"].startswith("optim/") for e in manifest["tensors"]),
        "blob_bytes": manifest.get("blob_bytes"),
        "config": manifest.get("config"),
    }


def cmd_inspect(args):
    path = Path(args.path)
    if path.is_dir() and (path / "manifest.json").exists():
        info = _inspect_checkpoint(path)
    elif path.is_dir() and (path / "checkpoint" / "manifest.json").exists():
        info = _inspect_checkpoint(path / "checkpoint")
    else:
        cfg = RunConfig.load(path, env=False)
        mc = cfg.model_config()
        info = {"kind": "config", "config": cfg.to_dict(), "model": mc.to_dict(),
                "video_tokens": mc.video_len, "reference_tokens": mc.ref_len}
    _dump(info)


def cmd_bench_cp(args):
    gen = torch.Generator().manual_seed(args.seed if args.seed is not None else 0)
    q, k, v = torch.randn(3, args.seq, args.heads, args.dhead, generator=gen, dtype=torch.float64).unbind(0)
    dense = dense_attention(q, k, v)
    rows = []
    for g in (int(x) for x in args.group_sizes.split(",")):
        spec = ShardSpec(g, args.seq, args.heads, args.dhead)
        out = context_parallel_attention(q, k, v, g)
        rows.append({"group_size": g, "max_abs_error": float((out - dense).abs().max()), **memory_accounting(spec)})
    _dump({"seq": args.seq, "heads": args.heads, "dhead": args.dhead, "results": rows}, args.out)


def cmd_make_data(args):
    cfg = _config(args)
    d = cfg.data
    n = d.n_scenes if args.n is None else args.n
    coupling = d.coupling if args.coupling is None else args.coupling
    scenes = make_synthetic_dataset(n, cfg.seed, coupling, frames=d.total_frames, height=d.height,
                                    width=d.width, channels=cfg.codec.pixel_channels, audio_rate=d.audio_rate)
    save_dataset(scenes, args.out)
    print(f"wrote {n} scenes to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="mirage-mini", description=__doc__.splitlines()[0], formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on synthetic scenes", formatter_class=fmt)
    t.add_argument("--config", help="run config JSON (defaults when omitted)")
    t.add_argument("--out", required=True, help="run directory for checkpoint/, metrics.jsonl, config.json")
    t.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint")
    t.add_argument("--steps", type=int, help="stop after this many steps instead of optimizer.steps")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate latent video tokens from a checkpoint", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True, help="checkpoint directory")
    s.add_argument("--config", help="config whose sampling section replaces the stored one")
    s.add_argument("--audio-features", help="audio feature file (manifest path without extension)")
    s.add_argument("--text", help="caption text")
    s.add_argument("--negative-text", help="text for the unconditional branch")
    s.add_argument("--ref-image", help="reference image array file [H, W, C]")
    s.add_argument("--ref-frame", type=int, help="pixel frame index of the reference relative to the window "
                                                    "start (default: first frame after the window)")
    s.add_argument("--steps", type=int, help="Euler steps (default: schedule.steps)")
    s.add_argument("--cfg-hi", type=float, help="CFG scale at the first step")
    s.add_argument("--cfg-lo", type=float, help="CFG scale at the last step")
    s.add_argument("--stg-weight", type=float, help="skip-layer guidance weight")
    s.add_argument("--stg-layers", help="comma separated block indices skipped for STG")
    s.add_argument("--cache", dest="cache", action="store_true", default=None, help="enable caching")
    s.add_argument("--no-cache", dest="cache", action="store_false", help="disable caching")
    s.add_argument("--seed", type=int, help="noise seed (default: config seed)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_sample)

    c = sub.add_parser("curate", help="run the filter funnel over JSONL records", formatter_class=fmt)
    c.add_argument("--records", required=True, help="JSON Lines curation records")
    c.add_argument("--thresholds", help="thresholds JSON (packaged defaults when omitted)")
    c.add_argument("--out", help="file receiving surviving clip ids, one per line")
    c.add_argument("--report", help="funnel report JSON path (stdout when omitted)")
    c.set_defaults(func=cmd_curate)

    i = sub.add_parser("inspect", help="summarise a checkpoint, run directory or config", formatter_class=fmt)
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)

    b = sub.add_parser("bench-cp", help="context-parallel equivalence and memory table", formatter_class=fmt)
    b.add_argument("--seq", type=int, default=240, help="sequence length")
    b.add_argument("--heads", type=int, default=8, help="attention heads")
    b.add_argument("--dhead", type=int, default=16, help="head dimension")
    b.add_argument("--group-sizes", default="1,2,4", help="comma separated worker counts")
    b.add_argument("--seed", type=int, help="q/k/v seed (default 0)")
    b.add_argument("--out", help="JSON output path (stdout when omitted)")
    b.set_defaults(func=cmd_bench_cp)

    m = sub.add_parser("make-data", help="write a synthetic scene dataset", formatter_class=fmt)
    m.add_argument("--config", help="run config JSON; its data section sets sizes")
    m.add_argument("--out", required=True, help="dataset directory")
    m.add_argument("--n", type=int, help="number of scenes (default: data.n_scenes)")
    m.add_argument("--coupling", type=float, help="audio/video coupling in [0, 1] (default: data.coupling)")
    m.add_argument("--seed", type=int, help="override the config seed")
    m.set_defaults(func=cmd_make_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
