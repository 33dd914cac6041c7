"""Ulysses-style context parallelism over in-process logical workers.

Tensors use the ``[..., seq, heads, d_head]`` layout. Each of ``g`` workers
starts with a contiguous ``seq / g`` slice of q, k and v. The first all-to-all
trades that for all ``seq`` tokens of ``heads / g`` heads, attention runs
locally per head, and a second all-to-all restores sequence sharding.

Workers talk only through :class:`Exchange`, a mailbox keyed by
``(src, dst)``; posting and collecting are separated by a barrier, and
receivers always concatenate in source-rank order, so the schedule in which
workers run never changes the numbers.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch

from .mmdit import dense_attention

SEQ, HEADS = "seq", "heads"


@dataclass(frozen=True)
class ShardSpec:
    world_size: int
    seq_len: int
    heads: int
    head_dim: int

    def __post_init__(self):
        g = self.world_size
        if g < 1:
            raise ValueError("world_size must be >= 1")
        if self.seq_len % g:
            raise ValueError(f"sequence length {self.seq_len} not divisible by world size {g}")
        if self.heads % g:
            raise ValueError(f"head count {self.heads} not divisible by world size {g}")

    @property
    def tokens_per_worker(self) -> int:
        return self.seq_len // self.world_size

    @property
    def heads_per_worker(self) -> int:
        return self.heads // self.world_size


@dataclass
class WorkerShard:
    rank: int
    data: torch.Tensor
    layout: str  # SEQ: [..., s/g, h, d]; HEADS: [..., s, h/g, d]


class Exchange:
    """Mailboxes for one all-to-all round."""

    def __init__(self, world_size: int):
        self.world_size = world_size
        self._box: dict[tuple[int, int], torch.Tensor] = {}
        self._lock = threading.Lock()

    def post(self, src: int, dst: int, payload: torch.Tensor):
        with self._lock:
            if (src, dst) in self._box:
                raise RuntimeError(f"duplicate message {src}->{dst}")
            self._box[(src, dst)] = payload

    def collect(self, dst: int) -> list[torch.Tensor]:
        with self._lock:
            missing = [s for s in range(self.world_size) if (s, dst) not in self._box]
            if missing:
                raise RuntimeError(f"worker {dst} is missing messages from {missing}")
            return [self._box.pop((s, dst)) for s in range(self.world_size)]


def shard_sequence(x: torch.Tensor, spec: ShardSpec) -> list[WorkerShard]:
    _check_full(x, spec)
    return [WorkerShard(r, chunk, SEQ) for r, chunk in enumerate(x.split(spec.tokens_per_worker, dim=-3))]


def gather_sequence(shards: Sequence[WorkerShard]) -> torch.Tensor:
    if any(s.layout != SEQ for s in shards):
        raise ValueError("gather_sequence expects sequence-sharded inputs")
    return torch.cat([s.data for s in sorted(shards, key=lambda s: s.rank)], dim=-3)


def _check_full(x: torch.Tensor, spec: ShardSpec):
    if x.shape[-3:] != (spec.seq_len, spec.heads, spec.head_dim):
        raise ValueError(f"tensor {tuple(x.shape)} does not match [..., {spec.seq_len}, {spec.heads}, {spec.head_dim}]")


def _check_layout(shards: Sequence[WorkerShard], layout: str, spec: ShardSpec):
    g = spec.world_size
    if sorted(s.rank for s in shards) != list(range(g)):
        raise ValueError(f"expected one shard per rank 0..{g - 1}")
    want = ((spec.tokens_per_worker, spec.heads, spec.head_dim) if layout == SEQ
            else (spec.seq_len, spec.heads_per_worker, spec.head_dim))
    for s in shards:
        if s.layout != layout or tuple(s.data.shape[-3:]) != want:
            raise ValueError(f"rank {s.rank}: layout {s.layout} {tuple(s.data.shape)} does not match {layout} {want}")


def _run_workers(fn: Callable[[int], None], ranks: Sequence[int], threads: bool):
    if threads:
        with ThreadPoolExecutor(max_workers=len(ranks)) as pool:
            list(pool.map(fn, ranks))
    else:
        for r in ranks:
            fn(r)


def all_to_all_reshard(shards: Sequence[WorkerShard], direction: str, spec: ShardSpec,
                       order: Optional[Sequence[int]] = None, threads: bool = False) -> list[WorkerShard]:
    """``seq->heads`` or ``heads->seq`` exchange between all workers."""
    if direction == "seq->heads":
        src_layout, dst_layout, split_dim, cat_dim = SEQ, HEADS, -2, -3
        piece = spec.heads_per_worker
    elif direction == "heads->seq":
        src_layout, dst_layout, split_dim, cat_dim = HEADS, SEQ, -3, -2
        piece = spec.tokens_per_worker
    else:
        raise ValueError(f"unknown direction {direction!r}")
    _check_layout(shards, src_layout, spec)
    by_rank = {s.rank: s for s in shards}
    ranks = list(order) if order is not None else list(range(spec.world_size))
    ex = Exchange(spec.world_size)

    def send(r):
        for dst, part in enumerate(by_rank[r].data.split(piece, dim=split_dim)):
            ex.post(r, dst, part)

    _run_workers(send, ranks, threads)
    # barrier: every message is posted before anyone collects
    out: dict[int, WorkerShard] = {}

    def recv(r):
        out[r] = WorkerShard(r, torch.cat(ex.collect(r), dim=cat_dim), dst_layout)

    _run_workers(recv, ranks, threads)
    return [out[r] for r in range(spec.world_size)]


def cp_attention(q: Sequence[WorkerShard], k: Sequence[WorkerShard], v: Sequence[WorkerShard],
                 spec: ShardSpec, attention=dense_attention,
                 order: Optional[Sequence[int]] = None, threads: bool = False) -> list[WorkerShard]:
    """Attention on sequence-sharded q/k/v; result is sequence-sharded too."""
    qh, kh, vh = (all_to_all_reshard(x, "seq->heads", spec, order, threads) for x in (q, k, v))
    local = [WorkerShard(r, attention(qh[r].data, kh[r].data, vh[r].data), HEADS) for r in range(spec.world_size)]
    return all_to_all_reshard(local, "heads->seq", spec, order, threads)


def context_parallel_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, world_size: int,
                               **kw) -> torch.Tensor:
    """Shard full tensors, run :func:`cp_attention`, gather the result."""
    spec = ShardSpec(world_size, q.shape[-3], q.shape[-2], q.shape[-1])
    shards = [shard_sequence(x, spec) for x in (q, k, v)]
    return gather_sequence(cp_attention(*shards, spec, **kw))


def make_cp_attention(world_size: int, **kw):
    """Attention function for :class:`~mirage_mini.mmdit.MirageDiT` backed by ``world_size`` workers."""
    return lambda q, k, v: context_parallel_attention(q, k, v, world_size, **kw)


def memory_accounting(spec: ShardSpec) -> dict:
    """Per-worker activation element counts for one attention call (batch of 1)."""
    s, h, d, g = spec.seq_len, spec.heads, spec.head_dim, spec.world_size
    seq_phase = 3 * (s // g) * h * d
    head_phase = 3 * s * (h // g) * d + (h // g) * s * s + s * (h // g) * d
    return {
        "world_size": g,
        "tokens_per_worker": s // g,
        "heads_per_worker": h // g,
        "seq_sharded_qkv_elements": seq_phase,
        "head_sharded_elements": head_phase,
        "peak_activation_elements": max(seq_phase, head_phase),
    }
