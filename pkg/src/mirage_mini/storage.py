"""Raw little-endian array files with JSON manifests.

Every array ``foo`` is stored as ``foo.bin`` (raw bytes, little-endian) next to
``foo.json`` holding ``{"dtype", "shape", ...extra}``.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any

import numpy as np


class ManifestError(ValueError):
    """Manifest is missing, unreadable, or inconsistent with its blob."""


def _paths(path: str | os.PathLike) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".bin")


def save_array(path: str | os.PathLike, arr: np.ndarray, **meta: Any) -> Path:
    """Write ``arr`` as raw little-endian bytes plus a JSON manifest. Returns the manifest path."""
    manifest_path, blob_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(arr)
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    blob_path.write_bytes(le.tobytes())
    manifest = {"dtype": np.dtype(arr.dtype).str.lstrip("<>=|"), "shape": list(arr.shape), **meta}
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path


def load_array(path: str | os.PathLike) -> tuple[np.ndarray, dict]:
    """Inverse of :func:`save_array`. Returns ``(array, manifest)``."""
    manifest_path, blob_path = _paths(path)
    try:
        manifest = json.loads(manifest_path.read_text())
        dtype = np.dtype(manifest["dtype"]).newbyteorder("<")
        shape = tuple(int(s) for s in manifest["shape"])
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"unreadable manifest {manifest_path}: {exc}") from exc
    raw = blob_path.read_bytes()
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(raw) != expected:
        raise ManifestError(f"{blob_path}: expected {expected} bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return arr, manifest
