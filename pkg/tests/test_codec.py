import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mirage_mini.codec import (
    CodecSpec,
    LatentVideo,
    ShapeError,
    decode_latents,
    decode_video,
    encode_chunk,
    encode_video,
    latent_frame_count,
    latent_shape,
    load_latents,
    patchify,
    save_latents,
    token_layout,
    unpatchify,
)

SMALL = CodecSpec(temporal_factor=3, spatial_factor=2, patch_size=2, pixel_channels=2)


def test_latent_frame_count_examples():
    assert latent_frame_count(25, 6) == 5
    assert latent_frame_count(7, 6) == 2
    for ft in (1, 2, 6, 9):
        assert latent_frame_count(1, ft) == 1


def test_latent_frame_count_rejects_bad_length():
    with pytest.raises(ShapeError, match="24.*6"):
        latent_frame_count(24, 6)


def test_default_latent_channels():
    assert CodecSpec().latent_channels == 3 * 6 * 8 * 8 == 1152


def test_full_scale_shapes():
    spec = CodecSpec()
    assert latent_shape(25, 1280, 720, spec) == (1152, 5, 160, 90)
    layout = token_layout(100, 1280, 720, spec)
    assert (layout["latent_frames"], layout["latent_height"], layout["latent_width"]) == (20, 160, 90)
    assert layout["sequence_length"] == 72000


def test_full_size_chunk_encodes_to_expected_shape():
    chunk = np.zeros((25, 1280, 720, 3), dtype=np.float32)
    lat = encode_chunk(chunk, CodecSpec())
    assert lat.shape == (1152, 5, 160, 90)
    assert not lat.values.any()


def test_multi_chunk_concatenates_on_time():
    spec = CodecSpec(6, 2, 2, 1)
    frames = np.random.default_rng(0).standard_normal((100, 4, 4, 1))
    lat = encode_video(frames, spec)
    assert lat.shape[1] == 20
    np.testing.assert_array_equal(decode_video(lat, spec), frames)


def test_first_latent_frame_replicates_frame_zero():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((7, 4, 4, 2))
    lat = encode_chunk(x, SMALL).values
    # channel order (dt, dy, dx, c): each dt slice of latent frame 0 is pixel frame 0
    per_dt = lat[:, 0].reshape(3, -1)
    assert all(np.array_equal(per_dt[0], per_dt[k]) for k in range(3))
    # latent frame 1, dt=0 slice holds pixel frame 1
    sub = lat.reshape(3, 2, 2, 2, 3, 2, 2)[0, :, :, :, 1]  # [dy, dx, c, hl, wl]
    np.testing.assert_array_equal(sub.transpose(3, 0, 4, 1, 2).reshape(4, 4, 2), x[1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_roundtrip_bitwise(k, hb, wb, seed):
    x = np.random.default_rng(seed).standard_normal((1 + 3 * k, 2 * hb, 2 * wb, 2))
    lat = encode_chunk(x, SMALL)
    np.testing.assert_array_equal(decode_latents(lat, SMALL).values, x)


def test_encode_is_linear():
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal((2, 7, 4, 6, 2))
    a, b = 0.7, -1.3
    lhs = encode_chunk(a * x + b * y, SMALL).values
    rhs = a * encode_chunk(x, SMALL).values + b * encode_chunk(y, SMALL).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_decode_of_arbitrary_latent_has_implied_shape():
    z = np.random.default_rng(3).standard_normal((SMALL.latent_channels, 3, 2, 5))
    px = decode_latents(z, SMALL)
    assert px.shape == (7, 4, 10, 2)
    assert not decode_latents(np.zeros_like(z), SMALL).values.any()


def test_shape_errors():
    with pytest.raises(ShapeError):
        encode_chunk(np.zeros((6, 4, 4, 2)), SMALL)
    with pytest.raises(ShapeError):
        encode_chunk(np.zeros((7, 5, 4, 2)), SMALL)
    with pytest.raises(ShapeError):
        decode_latents(np.zeros((3, 1, 1, 1)), SMALL)
    with pytest.raises(ShapeError):
        patchify(np.zeros((4, 1, 3, 2)), 2)


def test_patchify_counts_and_positions():
    tokens, pos = patchify(np.zeros((12, 20, 160, 90), dtype=np.float32), 2)
    assert tokens.shape == (72000, 48)
    assert pos[0].tolist() == [0, 0, 0] and pos[-1].tolist() == [19, 79, 44]
    tokens, _ = patchify(np.zeros((5, 1, 2, 2)), 2)
    assert tokens.shape == (1, 20)


def test_patchify_order_is_time_major_row_major():
    lat = np.arange(1 * 2 * 4 * 4, dtype=float).reshape(1, 2, 4, 4)
    tokens, pos = patchify(lat, 2)
    # token 1 is t=0, row 0, col 1 -> latent columns 2..3 of rows 0..1
    np.testing.assert_array_equal(tokens[1], [2, 3, 6, 7])
    assert pos[1].tolist() == [0, 0, 1]
    assert pos[4].tolist() == [1, 0, 0]


def test_unpatchify_inverts_patchify():
    lat = np.random.default_rng(4).standard_normal((3, 4, 6, 8))
    tokens, _ = patchify(lat, 2)
    np.testing.assert_array_equal(unpatchify(tokens, (4, 3, 4), 2, 3).values, lat)


def test_latent_file_roundtrip(tmp_path):
    z = np.random.default_rng(5).standard_normal((SMALL.latent_channels, 2, 1, 1))
    save_latents(tmp_path / "lat", LatentVideo(z), SMALL)
    lat, spec = load_latents(tmp_path / "lat")
    assert spec == SMALL
    np.testing.assert_array_equal(lat.values, z)
    raw = (tmp_path / "lat.bin").read_bytes()
    assert raw == z.astype("<f8").tobytes()
