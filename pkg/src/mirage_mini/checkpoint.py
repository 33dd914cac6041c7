"""Checkpoint directory: ``manifest.json`` plus one little-endian ``tensors.bin``.

The manifest lists every tensor as ``{name, shape, dtype, offset, nbytes}``
together with the run config, the training step and a SHA-256 of the blob.
Loading reads and verifies everything before touching the model, so a bad
checkpoint never leaves a half-loaded model behind.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Optional

import numpy as np
import torch

FORMAT = "mirage-mini-checkpoint/1"
MANIFEST, BLOB = "manifest.json", "tensors.bin"


class CheckpointError(RuntimeError):
    pass


class CorruptManifestError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    def __init__(self, name: str, stored, expected):
        self.tensor = name
        super().__init__(f"tensor {name!r}: stored shape {list(stored)} but config expects {list(expected)}")


def _optimizer_tensors(model: torch.nn.Module, opt: torch.optim.Optimizer) -> dict[str, torch.Tensor]:
    out = {}
    for name, p in model.named_parameters():
        for key, val in opt.state.get(p, {}).items():
            out[f"optim/{name}/{key}"] = torch.as_tensor(val)
    return out


def save_checkpoint(path, model: torch.nn.Module, optimizer: Optional[torch.optim.Optimizer] = None,
                    config: Optional[dict] = None, step: int = 0, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.mkdir(parents=True, exist_ok=True)
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        tensors.update(_optimizer_tensors(model, optimizer))
    entries, offset = [], 0
    digest = hashlib.sha256()
    with open(tmp / BLOB, "wb") as fh:
        for name in sorted(tensors):
            arr = tensors[name].detach().cpu().numpy()
            raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            fh.write(raw)
            digest.update(raw)
            entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>=|"),
                            "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {"format": FORMAT, "step": step, "config": config or {}, "tensors": entries,
                "blob_bytes": offset, "sha256": digest.hexdigest(), "extra": extra or {}}
    (tmp / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    if path.exists():
        for f in path.iterdir():
            f.unlink()
        path.rmdir()
    os.replace(tmp, path)
    return path


def read_manifest(path) -> dict:
    try:
        manifest = json.loads((Path(path) / MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptManifestError(f"cannot read manifest in {path}: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT or not isinstance(manifest.get("tensors"), list):
        raise CorruptManifestError(f"{path}: not a {FORMAT} manifest")
    return manifest


def read_tensors(path) -> tuple[dict[str, torch.Tensor], dict]:
    manifest = read_manifest(path)
    raw = (Path(path) / BLOB).read_bytes()
    if len(raw) != manifest.get("blob_bytes"):
        raise IntegrityError(f"blob is {len(raw)} bytes, manifest says {manifest.get('blob_bytes')}")
    if hashlib.sha256(raw).hexdigest() != manifest.get("sha256"):
        raise IntegrityError("blob checksum mismatch")
    tensors = {}
    for e in manifest["tensors"]:
        try:
            dtype = np.dtype(e["dtype"]).newbyteorder("<")
            shape = tuple(e["shape"])
            count = int(np.prod(shape, dtype=np.int64))
            if count * dtype.itemsize != e["nbytes"] or e["offset"] + e["nbytes"] > len(raw):
                raise IntegrityError(f"tensor {e['name']!r}: shape {list(shape)} inconsistent with stored bytes")
            arr = np.frombuffer(raw, dtype=dtype, count=count, offset=e["offset"]).reshape(shape)
        except (KeyError, TypeError) as exc:
            raise CorruptManifestError(f"bad tensor entry {e!r}") from exc
        tensors[e["name"]] = torch.from_numpy(arr.astype(dtype.newbyteorder("=")))
    return tensors, manifest


def _expected_optimizer_shapes(model: torch.nn.Module) -> dict:
    out = {}
    for name, p in model.named_parameters():
        for key in ("exp_avg", "exp_avg_sq"):
            out[f"optim/{name}/{key}"] = tuple(p.shape)
        out[f"optim/{name}/step"] = ()
    return out


def load_checkpoint(path, model: torch.nn.Module, optimizer: Optional[torch.optim.Optimizer] = None) -> dict:
    """Load into ``model`` (and ``optimizer``) after full validation. Returns the manifest."""
    manifest = read_manifest(path)
    entries = {e.get("name"): e for e in manifest["tensors"]}
    expected = {f"model/{k}": tuple(v.shape) for k, v in model.state_dict().items()}
    if optimizer is not None:
        opt_shapes = _expected_optimizer_shapes(model)
        expected.update({k: v for k, v in opt_shapes.items() if k in entries})
    for name, shape in expected.items():
        if name not in entries:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}")
        if tuple(entries[name].get("shape", ())) != shape:
            raise ShapeMismatchError(name, entries[name].get("shape"), shape)
    extra = [k for k in entries if k.startswith("model/") and k not in expected]
    if extra:
        raise CheckpointError(f"unexpected tensors {extra}")

    stored, _ = read_tensors(path)
    model.load_state_dict({k[len("model/"):]: v for k, v in stored.items() if k.startswith("model/")})
    if optimizer is not None:
        for name, p in model.named_parameters():
            state = {key: stored[f"optim/{name}/{key}"].clone()
                     for key in ("step", "exp_avg", "exp_avg_sq") if f"optim/{name}/{key}" in stored}
            if state:
                optimizer.state[p] = state
    return manifest
