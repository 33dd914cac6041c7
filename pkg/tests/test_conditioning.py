import numpy as np
import pytest
import torch

from mirage_mini.codec import CodecSpec, decode_latents
from mirage_mini.conditioning import (
    TEXT_LEN,
    AudioFeatures,
    InsufficientFeaturesError,
    ReferenceInWindowError,
    check_reference_outside,
    crop_audio_to_scene,
    embed_text,
    embed_text_stub,
    encode_reference_image,
    load_audio_features,
    project_audio,
    reference_time_position,
    resample_audio_features,
    sample_reference_frame,
    save_audio_features,
    tokenize,
)


def feats(values, rate=50.0):
    values = np.asarray(values, dtype=float)
    return AudioFeatures(values, rate, values.shape[0] / rate)


def test_resample_constant_is_constant():
    out = resample_audio_features(feats(np.full((20, 1024), 3.25)), 25.0, 10)
    assert out.shape == (10, 1024)
    np.testing.assert_array_equal(out, 3.25)


def test_resample_midpoint():
    # rows at t=0 s and t=1 s
    f = AudioFeatures(np.array([[0.0], [1.0]]), 1.0, 2.0)
    out = resample_audio_features(f, 2.0, 2)
    assert out[1, 0] == pytest.approx(0.5)


def test_resample_four_seconds_at_25fps():
    f = feats(np.random.default_rng(0).standard_normal((200, 1024)))
    assert resample_audio_features(f, 25.0, 100).shape == (100, 1024)


def test_resample_exact_on_affine_sequences():
    rate = 50.0
    times = np.arange(200) / rate
    slope, offset = np.random.default_rng(1).standard_normal((2, 1024))
    f = feats(offset + times[:, None] * slope, rate)
    out = resample_audio_features(f, 25.0, 100)
    expected = offset + (np.arange(100) / 25.0)[:, None] * slope
    np.testing.assert_allclose(out, expected, atol=1e-12)
    # off-grid rate as well
    out = resample_audio_features(f, 30.0, 119)
    expected = offset + (np.arange(119) / 30.0)[:, None] * slope
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_resample_clamps_past_end():
    f = feats(np.array([[0.0], [1.0], [2.0]]), 1.0)
    out = resample_audio_features(f, 1.0, 6)
    np.testing.assert_array_equal(out[:, 0], [0, 1, 2, 2, 2, 2])


def test_resample_needs_two_rows():
    with pytest.raises(InsufficientFeaturesError):
        resample_audio_features(AudioFeatures(np.zeros((1, 4)), 1.0, 1.0), 25.0, 3)


def test_crop():
    x = np.arange(40.0).reshape(10, 4)
    np.testing.assert_array_equal(crop_audio_to_scene(x, 0, 10), x)
    np.testing.assert_array_equal(crop_audio_to_scene(x, 6, 7), x[6:7])
    np.testing.assert_array_equal(crop_audio_to_scene(crop_audio_to_scene(x, 2, 9), 1, 4), crop_audio_to_scene(x, 3, 6))
    for bad in [(-1, 3), (3, 3), (5, 11)]:
        with pytest.raises(IndexError):
            crop_audio_to_scene(x, *bad)


def test_project_audio_identity_and_zero():
    x = torch.randn(5, 1024, dtype=torch.float64)
    s = project_audio(x, torch.eye(1024, dtype=torch.float64))
    assert torch.equal(s.tokens, x)
    assert s.positions[:, 0].tolist() == [0, 1, 2, 3, 4]
    assert not s.positions[:, 1:].any()
    assert not project_audio(x, torch.zeros(1024, 8, dtype=torch.float64)).tokens.any()
    with pytest.raises(ValueError):
        project_audio(x, torch.zeros(512, 8, dtype=torch.float64))


def test_project_audio_gradient_matches_finite_differences():
    torch.manual_seed(0)
    x = torch.randn(6, 1024, dtype=torch.float64)
    target = torch.randn(6, 16, dtype=torch.float64)
    proj = (0.05 * torch.randn(1024, 16, dtype=torch.float64)).requires_grad_()
    loss_fn = lambda p: ((project_audio(x, p).tokens - target) ** 2).sum()
    loss_fn(proj).backward()
    h = 1e-3
    rng = np.random.default_rng(0)
    with torch.no_grad():
        for _ in range(20):
            i, j = int(rng.integers(1024)), int(rng.integers(16))
            e = torch.zeros_like(proj)
            e[i, j] = h
            fd = (loss_fn(proj + e) - loss_fn(proj - e)) / (2 * h)
            an = proj.grad[i, j]
            assert abs(fd - an) <= 1e-4 * max(abs(an), abs(fd), 1e-8)


def test_text_stub_caps_and_pads():
    emb = embed_text_stub(list(range(300)), d_text=8)
    assert emb.values.shape == (TEXT_LEN, 8) and emb.valid_len == 256
    np.testing.assert_array_equal(emb.values, embed_text_stub(list(range(256)), d_text=8).values)

    empty = embed_text_stub([], d_text=8)
    assert empty.valid_len == 0 and not empty.values.any()

    short = embed_text_stub([5, 9], d_text=8)
    assert not short.values[2:].any()


def test_text_stub_is_deterministic_and_unit_variance():
    a = embed_text("A young woman smiles at the camera", 64)
    b = embed_text("A young woman smiles at the camera", 64)
    assert np.array_equal(a.values, b.values)
    rows = embed_text_stub(list(range(2000)), 64).values[:256]
    assert abs(rows.var() - 1.0) < 0.05


def test_tokenize_whitespace():
    assert tokenize("  hello\tworld\n") == tokenize("hello world")
    assert len(tokenize("one two three")) == 3
    assert tokenize("") == []


def test_reference_image_encoding():
    spec = CodecSpec(6, 2, 2, 1)
    img = np.random.default_rng(2).standard_normal((4, 6, 1))
    lat = encode_reference_image(img, spec)
    assert lat.shape[1] == 2
    px = decode_latents(lat, spec).values
    assert px.shape == (7, 4, 6, 1)
    for f in px:
        np.testing.assert_array_equal(f, img)
    assert not encode_reference_image(np.zeros((4, 6, 1)), spec).values.any()
    assert encode_reference_image(np.zeros((16, 16, 3)), CodecSpec()).shape == (1152, 2, 2, 2)


def test_reference_time_position():
    assert reference_time_position(30, 30, 6) == 0
    assert reference_time_position(0, 60, 6) == -10
    assert reference_time_position(45, 30, 6) == 2.5


def test_reference_must_be_outside_window():
    with pytest.raises(ReferenceInWindowError):
        check_reference_outside(35, 30, 13)
    check_reference_outside(43, 30, 13)
    check_reference_outside(29, 30, 13)
    rng = np.random.default_rng(3)
    draws = {sample_reference_frame(50, 10, 13, rng) for _ in range(500)}
    assert draws.isdisjoint(range(10, 23))
    assert draws == set(range(50)) - set(range(10, 23))
    with pytest.raises(ReferenceInWindowError):
        sample_reference_frame(13, 0, 13, rng)


def test_audio_feature_file_roundtrip(tmp_path):
    f = feats(np.random.default_rng(4).standard_normal((74, 1024)))
    save_audio_features(tmp_path / "a", f)
    g = load_audio_features(tmp_path / "a")
    np.testing.assert_array_equal(g.values, f.values)
    assert (g.source_rate, g.duration) == (f.source_rate, f.duration)


def test_audio_features_validate_length():
    with pytest.raises(ValueError):
        AudioFeatures(np.zeros((10, 4)), 50.0, 1.0)
