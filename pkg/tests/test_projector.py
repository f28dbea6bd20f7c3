import pytest
import torch

from latent3d.errors import ShapeMismatch
from latent3d.projector import ProjectorConfig, build_projector, project_latents

from conftest import tiny_projector_config


def test_output_shape_default_widths():
    p = build_projector(ProjectorConfig())
    out = p(torch.randn(12, 128), torch.randn(4, 16, 128))
    assert out.shape == (4, 16, 64)
    assert p(torch.randn(3, 12, 128), torch.randn(3, 4, 16, 128)).shape == (3, 4, 16, 64)


def test_zero_final_layer_and_zero_inputs_give_zero():
    p = build_projector(tiny_projector_config())
    out = p(torch.zeros(12, 32), torch.zeros(4, 16, 32))
    assert torch.count_nonzero(out) == 0


def test_every_latent_row_reaches_every_patch():
    torch.manual_seed(0)
    p = build_projector(tiny_projector_config(zero_init_final=False), dtype=torch.float64)
    lat = torch.randn(12, 32, dtype=torch.float64)
    img = torch.randn(4, 16, 32, dtype=torch.float64)
    base = p(lat, img)
    for i in range(12):
        bumped = lat.clone()
        bumped[i] += 0.1
        delta = (p(bumped, img) - base).abs().amax(-1)
        assert (delta > 0).all()


def test_latent_gradient_matches_finite_differences():
    torch.manual_seed(1)
    p = build_projector(tiny_projector_config(zero_init_final=False), dtype=torch.float64)
    lat = torch.randn(5, 32, dtype=torch.float64, requires_grad=True)
    img = torch.randn(2, 16, 32, dtype=torch.float64)
    w = torch.randn(2, 16, 64, dtype=torch.float64)
    f = lambda x: (p(x, img) * w).sum()  # noqa: E731
    (g,) = torch.autograd.grad(f(lat), lat)
    h = 1e-6
    with torch.no_grad():
        for i in range(5):
            for j in range(0, 32, 7):
                e = torch.zeros_like(lat)
                e[i, j] = h
                fd = (f(lat + e) - f(lat - e)) / (2 * h)
                assert abs(fd - g[i, j]) <= 1e-4 * max(1.0, abs(float(g[i, j])))


def test_width_and_empty_checks():
    p = build_projector(tiny_projector_config())
    with pytest.raises(ShapeMismatch):
        p(torch.zeros(3, 31), torch.zeros(4, 16, 32))
    with pytest.raises(ShapeMismatch):
        project_latents(p, torch.zeros(0, 32), torch.zeros(4, 16, 32))
    with pytest.raises(ValueError):
        ProjectorConfig(depth=0)


@pytest.mark.parametrize("depth", [1, 2, 3, 6])
def test_depths(depth):
    p = build_projector(tiny_projector_config(depth=depth, zero_init_final=False))
    assert len(p.layers) == depth
    assert p(torch.randn(4, 32), torch.randn(1, 16, 32)).shape == (1, 16, 64)
