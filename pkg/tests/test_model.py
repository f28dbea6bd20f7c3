import numpy as np
import pytest
import torch

from latent3d.errors import SequenceTooLong, ShapeMismatch
from latent3d.model import (
    ModelConfig,
    SamplingSpec,
    build_model,
    forward_hidden,
    generate_with_latents,
    param_count,
    pixels_tensor,
    sequence_logprobs,
)
from latent3d.trajectory import default_vocab

from conftest import tiny_model_config

V = default_vocab()
S = V.specials


@pytest.fixture(scope="module")
def model64():
    return build_model(tiny_model_config(), seed=0, dtype=torch.float64)


def feats(model, ex):
    return model.encode_images(pixels_tensor([ex.views], torch.float64))[0]


@pytest.mark.parametrize("d,L,h,r", [(128, 4, 4, 4), (32, 1, 2, 2), (48, 3, 3, 4), (64, 2, 8, 1)])
def test_param_count_formula(d, L, h, r):
    cfg = ModelConfig(d_model=d, n_layers=L, n_heads=h, mlp_ratio=r, max_len=300)
    m = build_model(cfg)
    assert param_count(cfg) == sum(p.numel() for p in m.parameters())


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(latent_size=0)
    with pytest.raises(ValueError):
        ModelConfig(patch=5)


def test_image_features(model64, examples):
    ex = examples[0]
    px = pixels_tensor([ex.views], torch.float64)
    f = model64.encode_images(px)
    assert f.shape == (1, 4, 16, 32)
    dup = torch.cat([px[:, :1], px[:, :1]], 1)
    g = model64.encode_images(dup)
    # the view-index embedding differs, the patch content term does not
    diff = g[0, 0] - g[0, 1]
    assert torch.allclose(diff, (model64.view_emb.weight[0] - model64.view_emb.weight[1]).expand_as(diff))
    zeros, ones = torch.zeros_like(px), torch.ones_like(px)
    assert not torch.allclose(model64.encode_images(zeros), model64.encode_images(ones))
    with pytest.raises(ShapeMismatch):
        model64.encode_images(px[:, :, :, :16])


@pytest.mark.parametrize("L,h", [(1, 1), (2, 2), (3, 4)])
def test_causality(examples, L, h):
    model = build_model(tiny_model_config(n_layers=L, n_heads=h), seed=L, dtype=torch.float64)
    ex = examples[1]
    q = V.encode(ex.question.text)
    traj = list(ex.reference_trajectory.tokens)
    f = feats(model, ex)
    h0, l0 = forward_hidden(model, q, f, traj)
    j = len(traj) // 2
    traj2 = traj[:j] + [(traj[j] + 5) % 58] + traj[j + 1 :]
    h1, l1 = forward_hidden(model, q, f, traj2)
    cut = f.shape[0] * f.shape[1] + len(q) + j
    assert torch.equal(h0[:cut], h1[:cut])
    assert torch.equal(l0[:cut], l1[:cut])
    assert not torch.equal(h0[cut], h1[cut])


def test_full_pass_equals_incremental_prefixes(model64, examples):
    ex = examples[2]
    q = V.encode(ex.question.text)
    traj = list(ex.reference_trajectory.tokens)
    f = feats(model64, ex)
    full, _ = forward_hidden(model64, q, f, traj)
    base = f.shape[0] * f.shape[1] + len(q)
    pads = [i for i, t in enumerate(traj) if t == S.latent_pad]
    for i in pads:
        inc, _ = forward_hidden(model64, q, f, traj[: i + 1])
        a, b = full[base + i], inc[-1]
        assert torch.linalg.vector_norm(a - b) <= 1e-6 * torch.linalg.vector_norm(a)


def test_sequence_logprobs(model64, examples):
    ex = examples[3]
    q = V.encode(ex.question.text)
    traj = list(ex.reference_trajectory.tokens)
    lp = sequence_logprobs(model64, q, ex.views, traj)
    assert lp.shape == (len(traj),)
    f = feats(model64, ex)
    _, logits = forward_hidden(model64, q, f, traj)
    base = f.shape[0] * f.shape[1] + len(q)
    norm = torch.log_softmax(logits, -1)
    assert torch.allclose(norm.exp().sum(-1), torch.ones(norm.shape[0], dtype=torch.float64), atol=1e-6)
    naive = torch.stack([norm[base + t - 1, tok] for t, tok in enumerate(traj)])
    assert torch.allclose(lp, naive, atol=1e-12)
    with pytest.raises(ShapeMismatch):
        sequence_logprobs(model64, q, ex.views, [999])


def test_greedy_tokens_are_the_argmax(model64, examples):
    ex = examples[4]
    q = V.encode(ex.question.text)
    px = pixels_tensor([ex.views], torch.float64)
    spec = SamplingSpec(max_new_tokens=30)
    g = generate_with_latents(model64, [q], px, spec)[0]
    assert g == generate_with_latents(model64, [q], px, spec)[0]
    f = feats(model64, ex)
    _, logits = forward_hidden(model64, q, f, g.tokens)
    base = f.shape[0] * f.shape[1] + len(q)
    forced = set()
    for i, t in enumerate(g.tokens):
        if t == S.latent_start:
            forced.update(range(i + 1, i + 2 + model64.cfg.latent_size))
    lp = torch.log_softmax(logits, -1)
    for t, tok in enumerate(g.tokens):
        if t in forced:
            continue
        row = lp[base + t - 1].clone()
        row[[V.img_id, V.pad_id]] = -float("inf")
        assert lp[base + t - 1, tok] == row.max()


def test_generation_latents_match_teacher_forcing(examples):
    model = build_model(tiny_model_config(), seed=0, dtype=torch.float64)
    # bias the head toward opening a latent block straight away
    with torch.no_grad():
        model.lm_head.weight[S.latent_start] += 5 * model.ln_f.weight.sign()
    exs = examples[5:8]
    qs = [V.encode(ex.question.text) for ex in exs]
    px = pixels_tensor([ex.views for ex in exs], torch.float64)
    spec = SamplingSpec(max_new_tokens=20)
    gens = generate_with_latents(model, qs, px, spec)
    for ex, q, g in zip(exs, qs, gens):
        n_pad = g.tokens.count(S.latent_pad)
        assert n_pad > 0 and g.latents.shape == (n_pad, 32)
        hid, _ = forward_hidden(model, q, feats(model, ex), g.tokens)
        base = 64 + len(q)
        pos = [base + i for i, t in enumerate(g.tokens) if t == S.latent_pad]
        assert torch.allclose(hid[pos], g.latents, atol=1e-10)
        # the padded batch decodes each row as it would alone
        solo = generate_with_latents(model, [q], pixels_tensor([ex.views], torch.float64), spec)[0]
        assert solo.tokens == g.tokens


def test_sampling_is_seeded(model64, examples):
    ex = examples[0]
    q = V.encode(ex.question.text)
    px = pixels_tensor([ex.views], torch.float64)
    a = generate_with_latents(model64, [q] * 3, px.expand(3, -1, -1, -1, -1), SamplingSpec(greedy=False, seed=5, max_new_tokens=15))
    b = generate_with_latents(model64, [q] * 3, px.expand(3, -1, -1, -1, -1), SamplingSpec(greedy=False, seed=5, max_new_tokens=15))
    assert [g.tokens for g in a] == [g.tokens for g in b]
    with pytest.raises(ValueError):
        SamplingSpec(greedy=False, temperature=0)


def test_budget_overflow_is_flagged_and_length_checked(model64, examples):
    ex = examples[0]
    q = V.encode(ex.question.text)
    px = pixels_tensor([ex.views], torch.float64)
    g = generate_with_latents(model64, [q], px, SamplingSpec(max_new_tokens=2))[0]
    assert len(g.tokens) <= 2 and not g.complete
    with pytest.raises(SequenceTooLong):
        generate_with_latents(model64, [q], px, SamplingSpec(max_new_tokens=1000))
