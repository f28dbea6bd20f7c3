import pytest
import torch

from latent3d.model import ModelConfig, build_model
from latent3d.projector import ProjectorConfig, build_projector
from latent3d.synthetic import GenerationConfig, build_dataset
from latent3d.trajectory import default_vocab

torch.set_num_threads(1)

SMALL_GEN = GenerationConfig(grid_w=5, grid_h=5, max_objects=4, z_levels=2)


@pytest.fixture(scope="session")
def vocab():
    return default_vocab()


@pytest.fixture(scope="session")
def examples():
    return build_dataset(24, 11, SMALL_GEN)


def tiny_model_config(**kw):
    base = dict(vocab_size=len(default_vocab()), d_model=32, n_layers=2, n_heads=2, max_len=256)
    base.update(kw)
    return ModelConfig(**base)


def tiny_projector_config(**kw):
    base = dict(depth=4, hidden=32, d_model=32, d_image=32, d_teacher=64, attn_dim=16)
    base.update(kw)
    return ProjectorConfig(**base)


@pytest.fixture
def tiny64():
    """Float64 model/projector pair with a non-zero projector output layer."""
    model = build_model(tiny_model_config(), seed=3, dtype=torch.float64)
    proj = build_projector(tiny_projector_config(zero_init_final=False), seed=4, dtype=torch.float64)
    return model, proj


def force_one_latent_block(model):
    """Make an untrained model open a latent block right away, exactly once."""
    start = default_vocab().specials.latent_start
    inner = model.forward

    def forward(ids, *args, **kw):
        h, logits = inner(ids, *args, **kw)
        fresh = ~(ids == start).any(1)
        logits = logits.clone()
        logits[fresh, :, start] += 1e4
        return h, logits

    model.forward = forward
    return model


# acceptance criteria report, one line per criterion at the end of the session
CRITERIA: dict[int, tuple[bool, str]] = {}


def record(number: int, passed: bool, detail: str = "") -> None:
    CRITERIA[number] = (bool(passed), detail)
    print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
