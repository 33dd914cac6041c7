import json

import pytest
import torch

from conftest import make_model
from mirage_mini.checkpoint import (
    CorruptManifestError,
    IntegrityError,
    ShapeMismatchError,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
)
from mirage_mini.conditioning import ConditioningSet
from mirage_mini.config import SEED_ENV, RunConfig
from mirage_mini.flow_matching import make_optimizer


def trained_pair(seed=0):
    model = make_model(seed=seed, randomize=True)
    opt = make_optimizer(model.parameters())
    x = torch.randn(1, model.cfg.video_len, model.cfg.token_dim, dtype=torch.float64)
    model(x, ConditioningSet.null(), 0.5).pow(2).mean().backward()
    opt.step()
    return model, opt


def test_roundtrip_is_bitwise(tmp_path):
    model, opt = trained_pair()
    save_checkpoint(tmp_path / "ck", model, opt, {"seed": 3}, step=7)
    fresh = make_model(seed=9)
    fresh_opt = make_optimizer(fresh.parameters())
    manifest = load_checkpoint(tmp_path / "ck", fresh, fresh_opt)
    assert manifest["step"] == 7 and manifest["config"] == {"seed": 3}
    for (n, a), (_, b) in zip(model.state_dict().items(), fresh.state_dict().items()):
        assert torch.equal(a, b), n
    assert opt.state
    for p, q in zip(model.parameters(), fresh.parameters()):
        assert (p in opt.state) == (q in fresh_opt.state)
        if p not in opt.state:
            continue
        for key in ("exp_avg", "exp_avg_sq", "step"):
            assert torch.equal(torch.as_tensor(opt.state[p][key]), torch.as_tensor(fresh_opt.state[q][key]))


def test_save_replaces_existing_checkpoint(tmp_path):
    model, _ = trained_pair()
    save_checkpoint(tmp_path / "ck", model, step=1)
    save_checkpoint(tmp_path / "ck", model, step=2)
    assert read_manifest(tmp_path / "ck")["step"] == 2
    assert not (tmp_path / "ck.tmp").exists()


def test_truncated_blob_is_integrity_error_without_partial_load(tmp_path):
    model, _ = trained_pair()
    save_checkpoint(tmp_path / "ck", model)
    blob = tmp_path / "ck" / "tensors.bin"
    blob.write_bytes(blob.read_bytes()[:-100])
    fresh = make_model(seed=5)
    before = {k: v.clone() for k, v in fresh.state_dict().items()}
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "ck", fresh)
    assert all(torch.equal(before[k], v) for k, v in fresh.state_dict().items())


def test_flipped_byte_is_integrity_error(tmp_path):
    model, _ = trained_pair()
    save_checkpoint(tmp_path / "ck", model)
    blob = tmp_path / "ck" / "tensors.bin"
    raw = bytearray(blob.read_bytes())
    raw[10] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "ck", make_model())


def test_edited_shape_names_the_tensor(tmp_path):
    model, _ = trained_pair()
    save_checkpoint(tmp_path / "ck", model)
    path = tmp_path / "ck" / "manifest.json"
    manifest = json.loads(path.read_text())
    target = next(e for e in manifest["tensors"] if e["name"] == "model/head.weight")
    target["shape"] = [target["shape"][1], target["shape"][0]]
    path.write_text(json.dumps(manifest))
    with pytest.raises(ShapeMismatchError) as info:
        load_checkpoint(tmp_path / "ck", make_model())
    assert info.value.tensor == "model/head.weight"
    assert "head.weight" in str(info.value)


def test_model_of_other_width_is_rejected(tmp_path):
    save_checkpoint(tmp_path / "ck", make_model())
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(tmp_path / "ck", make_model(d_model=32))


def test_corrupt_manifest(tmp_path):
    save_checkpoint(tmp_path / "ck", make_model())
    (tmp_path / "ck" / "manifest.json").write_text("{not json")
    with pytest.raises(CorruptManifestError):
        load_checkpoint(tmp_path / "ck", make_model())
    (tmp_path / "ck" / "manifest.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(CorruptManifestError):
        read_manifest(tmp_path / "ck")


def test_error_types_are_distinct():
    assert not issubclass(ShapeMismatchError, CorruptManifestError)
    assert not issubclass(IntegrityError, CorruptManifestError)


def test_config_roundtrip(tmp_path):
    cfg = RunConfig()
    cfg.optimizer.steps = 17
    cfg.sampling.stg_skip_layers = (1,)
    cfg.dump(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json", env=False)
    assert back == cfg


def test_config_rejects_unknown_keys(tmp_path):
    for bad in ({"sed": 1}, {"model": {"d_modle": 64}}, {"sampling": {"cache": True}}):
        (tmp_path / "c.json").write_text(json.dumps(bad))
        with pytest.raises(ValueError, match="unknown keys"):
            RunConfig.load(tmp_path / "c.json")


def test_config_validates_values():
    with pytest.raises(ValueError):
        RunConfig.from_dict({"schedule": {"steps": 0}})
    with pytest.raises(ValueError):
        RunConfig.from_dict({"dropout": {"text": 2.0}})
    with pytest.raises(ValueError):
        RunConfig.from_dict({"sampling": {"cfg_hi": 0.5, "cfg_lo": 1.0}}).sampling.guidance(64)


def test_seed_env_override(tmp_path, monkeypatch):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 4}))
    monkeypatch.delenv(SEED_ENV, raising=False)
    assert RunConfig.load(tmp_path / "c.json").seed == 4
    monkeypatch.setenv(SEED_ENV, "11")
    assert RunConfig.load(tmp_path / "c.json").seed == 11
    assert RunConfig.load().seed == 11
    assert RunConfig.load(tmp_path / "c.json", env=False).seed == 4


def test_default_model_layout():
    mc = RunConfig().model_config()
    assert (mc.d_model, mc.heads, mc.depth) == (128, 4, 2)
    assert mc.video_grid == (3, 2, 2) and mc.token_dim == 96 and mc.audio_len == 13
