import dataclasses

import numpy as np
import pytest
import torch

from mirage_mini.codec import CodecSpec, encode_chunk
from mirage_mini.conditioning import ConditioningSet, embed_text
from mirage_mini.flow_matching import fm_loss
from mirage_mini.mmdit import MirageDiT, ModelConfig

DESK_CODEC = CodecSpec(6, 2, 2, 1)
D = torch.float64


def small_config(audio_len=None, **kw) -> ModelConfig:
    base = dict(d_model=64, heads=4, depth=2, dtype="float64")
    base.update(kw)
    cfg = ModelConfig.for_clip(DESK_CODEC, 13, 8, 8, **base)
    return cfg if audio_len is None else dataclasses.replace(cfg, audio_len=audio_len)


def make_model(seed=0, randomize=False, **kw) -> MirageDiT:
    torch.manual_seed(seed)
    model = MirageDiT(small_config(**kw), DESK_CODEC.patch_size)
    if randomize:
        with torch.no_grad():
            for p in model.parameters():
                p.add_(0.05 * torch.randn_like(p))
    return model


def full_conditions(cfg: ModelConfig, seed=0) -> ConditioningSet:
    rng = np.random.default_rng(seed)
    ref = encode_chunk(np.repeat(rng.standard_normal((1, 8, 8, 1)), 7, axis=0), DESK_CODEC)
    return ConditioningSet(ref=ref, ref_time=float(rng.integers(3, 6)), audio=rng.standard_normal((cfg.audio_len, 1024)),
                           text=embed_text(f"speaker {seed} talks about the weather", cfg.d_text))


def loss_batch(cfg, seed=0):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.randn(2, cfg.video_len, cfg.token_dim, generator=g, dtype=D)
    x1 = torch.randn(2, cfg.video_len, cfg.token_dim, generator=g, dtype=D)
    conds = [full_conditions(cfg, seed), ConditioningSet.null()]
    return x0, x1, conds, torch.tensor([0.8, 0.35], dtype=D)


def parameter_groups(model) -> dict:
    """Parameter (name, shape) lists keyed by modality group; input/output and timestep weights are "shared"."""
    groups = {}
    for n, p in model.named_parameters():
        groups.setdefault(parameter_group(n), []).append((n, p.shape))
    return groups


def parameter_group(name: str) -> str:
    for group in ("text", "audio", "visual", "ref", "video"):
        if f".{group}" in name or name.startswith(f"{group}_"):
            return {"ref": "visual", "video": "visual"}.get(group, group)
    return "shared"


def directional_check(model, batch, directions, h):
    """Central differences of fm_loss along each unit direction vs. the autograd gradient."""
    params = dict(model.named_parameters())
    model.zero_grad()
    fm_loss(model, *batch).backward()
    worst = {}
    with torch.no_grad():
        for label, u in directions.items():
            # grad is None for weights that cannot reach the video head (text/audio MLPs of the last block)
            analytic = sum(float((params[n].grad * d).sum()) for n, d in u.items() if params[n].grad is not None)
            base = {n: params[n].clone() for n in u}
            values = []
            for sign in (1, -1):
                for n, d in u.items():
                    params[n].copy_(base[n] + sign * h * d)
                values.append(float(fm_loss(model, *batch)))
            for n in u:
                params[n].copy_(base[n])
            fd = (values[0] - values[1]) / (2 * h)
            if analytic == 0.0:
                worst[label] = (0.0 if abs(fd) < 1e-9 else float("inf"), fd, analytic)
            else:
                worst[label] = (abs(fd - analytic) / max(abs(fd), abs(analytic)), fd, analytic)
    return worst


def unit_directions(named_shapes, seed=0):
    gen = torch.Generator().manual_seed(seed)
    u = {n: torch.randn(shape, generator=gen, dtype=D) for n, shape in named_shapes}
    norm = torch.sqrt(sum((d ** 2).sum() for d in u.values()))
    return {n: d / norm for n, d in u.items()}


@pytest.fixture
def model():
    return make_model()


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """The default desk configuration trained once for the whole session."""
    from mirage_mini.config import RunConfig
    from mirage_mini.train import train

    cfg = RunConfig.load(env=False)
    out = tmp_path_factory.mktemp("overfit")
    result = train(cfg, out)
    return cfg, result, out


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
