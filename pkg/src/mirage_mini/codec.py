"""Invertible space-to-depth video codec and patch tokenizer.

The codec reproduces the token arithmetic of a causal 3D video VAE (6x temporal,
8x spatial downsampling, 2x2 patches) with an exact rearrangement: the first
pixel frame is replicated ``ft`` times so that a chunk of ``1 + k*ft`` frames
packs into ``1 + k`` latent frames.

Channel packing order inside a latent cell is ``(dt, dy, dx, c)``, i.e. the
pixel offset in time varies slowest and the colour channel fastest.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .storage import load_array, save_array

CHUNK_FRAMES = 25


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class CodecSpec:
    temporal_factor: int = 6
    spatial_factor: int = 8
    patch_size: int = 2
    pixel_channels: int = 3

    def __post_init__(self):
        for name in ("temporal_factor", "spatial_factor", "patch_size", "pixel_channels"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")

    @property
    def latent_channels(self) -> int:
        return self.pixel_channels * self.temporal_factor * self.spatial_factor**2

    @property
    def token_dim(self) -> int:
        return self.latent_channels * self.patch_size**2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PixelChunk:
    values: np.ndarray  # [Tp, Hp, Wp, Cp]

    @property
    def shape(self):
        return self.values.shape


@dataclass
class LatentVideo:
    values: np.ndarray  # [C, Tl, Hl, Wl]

    @property
    def shape(self):
        return self.values.shape


def latent_frame_count(chunk_frames: int, ft: int) -> int:
    if ft < 1 or chunk_frames < 1 or (chunk_frames - 1) % ft:
        raise ShapeError(
            f"chunk_frames={chunk_frames} must satisfy chunk_frames = 1 (mod ft) with ft={ft}"
        )
    return 1 + (chunk_frames - 1) // ft


def latent_shape(frames: int, height: int, width: int, spec: CodecSpec,
                 chunk_frames: int | None = None) -> tuple[int, int, int, int]:
    """Latent shape ``(C, Tl, Hl, Wl)`` without touching pixel data.

    With ``chunk_frames`` set, ``frames`` must be a multiple of it and each chunk
    is encoded independently (latent time axes concatenated).
    """
    fs = spec.spatial_factor
    if height % fs or width % fs:
        raise ShapeError(f"pixel size {height}x{width} not divisible by spatial factor {fs}")
    if chunk_frames is None:
        tl = latent_frame_count(frames, spec.temporal_factor)
    else:
        if frames % chunk_frames:
            raise ShapeError(f"{frames} frames is not a whole number of {chunk_frames}-frame chunks")
        tl = (frames // chunk_frames) * latent_frame_count(chunk_frames, spec.temporal_factor)
    return spec.latent_channels, tl, height // fs, width // fs


def token_layout(frames: int, height: int, width: int, spec: CodecSpec,
                 chunk_frames: int | None = CHUNK_FRAMES) -> dict:
    """Report latent and token dimensions for a pixel video of the given size."""
    c, tl, hl, wl = latent_shape(frames, height, width, spec, chunk_frames)
    p = spec.patch_size
    if hl % p or wl % p:
        raise ShapeError(f"latent size {hl}x{wl} not divisible by patch size {p}")
    return {
        "latent_channels": c,
        "latent_frames": tl,
        "latent_height": hl,
        "latent_width": wl,
        "grid": (tl, hl // p, wl // p),
        "sequence_length": tl * (hl // p) * (wl // p),
        "token_dim": spec.token_dim,
    }


def encode_chunk(chunk: PixelChunk | np.ndarray, spec: CodecSpec) -> LatentVideo:
    x = chunk.values if isinstance(chunk, PixelChunk) else np.asarray(chunk)
    if x.ndim != 4 or x.shape[-1] != spec.pixel_channels:
        raise ShapeError(f"expected [Tp, Hp, Wp, {spec.pixel_channels}] pixels, got {x.shape}")
    tp, hp, wp, cp = x.shape
    ft, fs = spec.temporal_factor, spec.spatial_factor
    _, tl, hl, wl = latent_shape(tp, hp, wp, spec)
    # causal padding: frame 0 stands in for the ft-1 frames before it
    padded = np.concatenate([np.repeat(x[:1], ft - 1, axis=0), x], axis=0)
    blocks = padded.reshape(tl, ft, hl, fs, wl, fs, cp)
    lat = blocks.transpose(1, 3, 5, 6, 0, 2, 4).reshape(spec.latent_channels, tl, hl, wl)
    return LatentVideo(np.ascontiguousarray(lat))


def decode_latents(lat: LatentVideo | np.ndarray, spec: CodecSpec) -> PixelChunk:
    z = lat.values if isinstance(lat, LatentVideo) else np.asarray(lat)
    if z.ndim != 4 or z.shape[0] != spec.latent_channels:
        raise ShapeError(f"expected [{spec.latent_channels}, Tl, Hl, Wl] latents, got {z.shape}")
    c, tl, hl, wl = z.shape
    ft, fs, cp = spec.temporal_factor, spec.spatial_factor, spec.pixel_channels
    blocks = z.reshape(ft, fs, fs, cp, tl, hl, wl).transpose(4, 0, 5, 1, 6, 2, 3)
    frames = blocks.reshape(tl * ft, hl * fs, wl * fs, cp)
    # latent frame 0 holds ft copies of pixel frame 0; keep the first
    return PixelChunk(np.ascontiguousarray(np.concatenate([frames[:1], frames[ft:]], axis=0)))


def encode_video(frames: np.ndarray, spec: CodecSpec, chunk_frames: int = CHUNK_FRAMES) -> LatentVideo:
    """Encode consecutive ``chunk_frames``-frame chunks, concatenated on latent time."""
    frames = np.asarray(frames)
    if frames.shape[0] % chunk_frames:
        raise ShapeError(f"{frames.shape[0]} frames is not a whole number of {chunk_frames}-frame chunks")
    parts = [encode_chunk(frames[i:i + chunk_frames], spec).values
             for i in range(0, frames.shape[0], chunk_frames)]
    return LatentVideo(np.concatenate(parts, axis=1))


def decode_video(lat: LatentVideo | np.ndarray, spec: CodecSpec, chunk_frames: int = CHUNK_FRAMES) -> np.ndarray:
    z = lat.values if isinstance(lat, LatentVideo) else np.asarray(lat)
    per_chunk = latent_frame_count(chunk_frames, spec.temporal_factor)
    if z.shape[1] % per_chunk:
        raise ShapeError(f"{z.shape[1]} latent frames is not a whole number of {per_chunk}-frame chunks")
    return np.concatenate([decode_latents(z[:, i:i + per_chunk], spec).values
                           for i in range(0, z.shape[1], per_chunk)], axis=0)


def patch_positions(grid: tuple[int, int, int]) -> np.ndarray:
    """(t, h, w) coordinates for a time-major, row-major token grid; shape [N, 3]."""
    t, h, w = np.meshgrid(*(np.arange(n) for n in grid), indexing="ij")
    return np.stack([t.ravel(), h.ravel(), w.ravel()], axis=-1).astype(np.float64)


def patchify(lat: LatentVideo | np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Flatten latents to tokens ``[N, C*p*p]``; also returns ``[N, 3]`` positions."""
    z = lat.values if isinstance(lat, LatentVideo) else np.asarray(lat)
    c, tl, hl, wl = z.shape
    if hl % p or wl % p:
        raise ShapeError(f"latent size {hl}x{wl} not divisible by patch size {p}")
    gh, gw = hl // p, wl // p
    tokens = z.reshape(c, tl, gh, p, gw, p).transpose(1, 2, 4, 0, 3, 5).reshape(tl * gh * gw, c * p * p)
    return np.ascontiguousarray(tokens), patch_positions((tl, gh, gw))


def unpatchify(tokens: np.ndarray, grid: tuple[int, int, int], p: int, channels: int) -> LatentVideo:
    tl, gh, gw = grid
    tokens = np.asarray(tokens)
    if tokens.shape != (tl * gh * gw, channels * p * p):
        raise ShapeError(f"tokens {tokens.shape} do not match grid {grid} with {channels}x{p}x{p} features")
    z = tokens.reshape(tl, gh, gw, channels, p, p).transpose(3, 0, 1, 4, 2, 5)
    return LatentVideo(np.ascontiguousarray(z.reshape(channels, tl, gh * p, gw * p)))


def save_latents(path, lat: LatentVideo | np.ndarray, spec: CodecSpec):
    z = lat.values if isinstance(lat, LatentVideo) else np.asarray(lat)
    return save_array(path, z, codec=spec.to_dict())


def load_latents(path) -> tuple[LatentVideo, CodecSpec]:
    z, manifest = load_array(path)
    spec = CodecSpec(**manifest["codec"])
    if z.ndim != 4 or z.shape[0] != spec.latent_channels:
        raise ShapeError(f"stored latent {z.shape} inconsistent with {spec}")
    return LatentVideo(z), spec
