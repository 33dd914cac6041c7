import numpy as np
import pytest
import torch

from mirage_mini.context_parallel import (
    Exchange,
    ShardSpec,
    WorkerShard,
    all_to_all_reshard,
    context_parallel_attention,
    cp_attention,
    gather_sequence,
    memory_accounting,
    shard_sequence,
)
from mirage_mini.mmdit import dense_attention

D = torch.float64


def numpy_attention(q, k, v):
    """Dense softmax attention on [seq, heads, d] arrays, written out per head."""
    s, h, d = q.shape
    out = np.empty_like(q)
    for j in range(h):
        scores = q[:, j] @ k[:, j].T / np.sqrt(d)
        scores -= scores.max(axis=1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=1, keepdims=True)
        out[:, j] = w @ v[:, j]
    return out


def qkv(s, h, d=8, seed=0, batch=()):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(3, *batch, s, h, d, generator=gen, dtype=D).unbind(0)


@pytest.mark.parametrize("g", [1, 2, 4])
@pytest.mark.parametrize("s", [64, 240])
@pytest.mark.parametrize("h", [4, 8])
def test_matches_dense_oracle(g, s, h):
    q, k, v = qkv(s, h, seed=g * 1000 + s + h)
    out = context_parallel_attention(q, k, v, g)
    oracle = numpy_attention(q.numpy(), k.numpy(), v.numpy())
    assert np.abs(out.numpy() - oracle).max() <= 1e-12
    assert (out - dense_attention(q, k, v)).abs().max() <= 1e-12


def test_single_worker_is_bitwise_dense():
    q, k, v = qkv(48, 4, seed=1)
    assert torch.equal(context_parallel_attention(q, k, v, 1), dense_attention(q, k, v))


def test_batched_inputs():
    q, k, v = qkv(32, 4, seed=2, batch=(3,))
    assert (context_parallel_attention(q, k, v, 4) - dense_attention(q, k, v)).abs().max() <= 1e-12


@pytest.mark.parametrize("g", [1, 2, 4])
def test_reshard_round_trip_and_multiset(g):
    spec = ShardSpec(g, 40, 8, 6)
    x = torch.randn(40, 8, 6, dtype=D)
    shards = shard_sequence(x, spec)
    heads = all_to_all_reshard(shards, "seq->heads", spec)
    for r, sh in enumerate(heads):
        assert sh.layout == "heads" and sh.data.shape == (40, 8 // g, 6)
        assert torch.equal(sh.data, x[:, r * (8 // g):(r + 1) * (8 // g)])
    all_values = torch.cat([sh.data.reshape(-1) for sh in heads]).sort().values
    assert torch.equal(all_values, x.reshape(-1).sort().values)
    back = all_to_all_reshard(heads, "heads->seq", spec)
    for a, b in zip(shards, back):
        assert torch.equal(a.data, b.data) and a.rank == b.rank
    assert torch.equal(gather_sequence(back), x)


def test_single_worker_reshard_is_identity():
    spec = ShardSpec(1, 10, 2, 4)
    x = torch.randn(10, 2, 4, dtype=D)
    out = all_to_all_reshard(shard_sequence(x, spec), "seq->heads", spec)
    assert torch.equal(out[0].data, x)


def test_execution_order_and_threads_do_not_change_results():
    spec = ShardSpec(4, 64, 8, 8)
    q, k, v = qkv(64, 8, seed=3)
    sh = [shard_sequence(z, spec) for z in (q, k, v)]
    base = gather_sequence(cp_attention(*sh, spec))
    for order in ([3, 1, 0, 2], [2, 3, 1, 0]):
        assert torch.equal(gather_sequence(cp_attention(*sh, spec, order=order)), base)
    for _ in range(3):
        assert torch.equal(gather_sequence(cp_attention(*sh, spec, threads=True)), base)


def test_uneven_or_mismatched_layouts_rejected():
    with pytest.raises(ValueError):
        ShardSpec(4, 30, 8, 8)
    with pytest.raises(ValueError):
        ShardSpec(3, 30, 8, 8)
    with pytest.raises(ValueError):
        ShardSpec(0, 30, 8, 8)
    spec = ShardSpec(2, 8, 2, 4)
    shards = shard_sequence(torch.zeros(8, 2, 4), spec)
    with pytest.raises(ValueError):
        all_to_all_reshard(shards, "heads->seq", spec)
    with pytest.raises(ValueError):
        all_to_all_reshard(shards[:1], "seq->heads", spec)
    with pytest.raises(ValueError):
        all_to_all_reshard(shards, "sideways", spec)
    with pytest.raises(ValueError):
        shard_sequence(torch.zeros(9, 2, 4), spec)


def test_exchange_rejects_duplicates_and_missing():
    ex = Exchange(2)
    ex.post(0, 1, torch.zeros(1))
    with pytest.raises(RuntimeError):
        ex.post(0, 1, torch.zeros(1))
    with pytest.raises(RuntimeError):
        ex.collect(1)


def test_full_scale_token_accounting():
    spec = ShardSpec(8, 72000, 48, 128)
    assert spec.tokens_per_worker == 9000
    assert memory_accounting(spec)["tokens_per_worker"] == 9000


@pytest.mark.parametrize("s,h", [(240, 8), (72000, 48)])
def test_memory_accounting_scales_inverse_with_group(s, h):
    base = memory_accounting(ShardSpec(1, s, h, 16))
    for g in (2, 4, 8):
        if s % g or h % g:
            continue
        acc = memory_accounting(ShardSpec(g, s, h, 16))
        assert acc["tokens_per_worker"] * g == s
        for key in ("seq_sharded_qkv_elements", "head_sharded_elements", "peak_activation_elements"):
            assert acc[key] * g == base[key]
        assert acc["seq_sharded_qkv_elements"] == 3 * (s // g) * h * 16
