import json
import logging

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from latent3d.checkpoint import module_hash
from latent3d.errors import DegenerateVector, GroupTooSmall, NonFiniteObjective
from latent3d.model import build_model, trajectory_logprobs
from latent3d.projector import build_projector
from latent3d.rl import (
    RLConfig,
    _rollout_batch,
    compute_advantages,
    grpo_objective,
    grpo_token_terms,
    reward_3d,
    reward_answer,
    reward_format,
    sample_groups,
    train_rl,
)
from latent3d.sft import Schedule
from latent3d.trajectory import FormatGrammar, compose_trajectory, default_vocab

from conftest import force_one_latent_block, tiny_model_config, tiny_projector_config

V = default_vocab()
S = V.specials
G = FormatGrammar(S, 3)


def test_reward_3d_reference_pairs():
    t = torch.randn(4, 16, 64, dtype=torch.float64)
    assert abs(reward_3d(t, t) - 1.0) <= 1e-9
    assert abs(reward_3d(-t, t)) <= 1e-9
    a = torch.zeros(2, 3, dtype=torch.float64)
    b = torch.zeros(2, 3, dtype=torch.float64)
    a[0, 0], b[1, 2] = 2.0, 5.0
    assert abs(reward_3d(a, b) - 0.5) <= 1e-9


def test_reward_3d_zero_vector(caplog):
    with caplog.at_level(logging.WARNING):
        assert reward_3d(torch.zeros(5), torch.ones(5)) == 0.5
    assert "zero-norm" in caplog.text
    with pytest.raises(DegenerateVector):
        reward_3d(torch.zeros(5), torch.ones(5), strict=True)


def _traj(answer_words, close=True):
    tail = [S.think_close, S.answer_open] + V.encode(answer_words) + ([S.answer_close] if close else [])
    return list(compose_trajectory([], 3, [S.think_open] + V.encode("north view") + tail, S).tokens)


def test_format_and_answer_rewards():
    good = _traj("B")
    assert (reward_format(good, G), reward_answer(good, "B")) == (1, 1)
    assert (reward_format(good, G), reward_answer(good, "b")) == (1, 1)
    wrong = _traj("A")
    assert (reward_format(wrong, G), reward_answer(wrong, "B")) == (1, 0)
    unclosed = _traj("B", close=False)
    assert reward_format(unclosed, G) == 0
    assert reward_answer(unclosed, "B") == 1


def test_numeric_answer_tolerance():
    assert reward_answer(_traj("4.24"), 4.24) == 1
    assert reward_answer(_traj("4.25"), 4.24) == 0
    assert reward_answer(_traj("north"), 4.24) == 0


def test_advantage_examples():
    assert torch.equal(compute_advantages([2.0, 2.0, 2.0, 2.0]), torch.zeros(4, dtype=torch.float64))
    a = compute_advantages([0.0, 1.0], 1e-8)
    assert torch.allclose(a, torch.tensor([-1.0, 1.0], dtype=torch.float64), atol=1e-7)
    assert torch.equal(compute_advantages([0.0, 1.0, 2.0]), compute_advantages([10.0, 11.0, 12.0]))
    with pytest.raises(GroupTooSmall):
        compute_advantages([1.0])
    with pytest.raises(GroupTooSmall):
        RLConfig(group_size=1)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 3, allow_nan=False), min_size=2, max_size=16))
def test_advantage_statistics(rewards):
    a = compute_advantages(rewards)
    r = np.asarray(rewards)
    # the mean's rounding residual is scaled by 1 / (std + delta)
    assert abs(float(a.mean())) <= 1e-9 + 1e-15 * max(r.max(), 1.0) / (r.std() + 1e-8)
    if r.std() > 1e-3:
        assert abs(float(a.std(unbiased=False)) - 1.0) <= 1e-5
    assert float(a.abs().max()) <= (len(rewards) - 1) ** 0.5 + 1e-9


def test_per_token_rewards_normalise_per_column():
    r = torch.tensor([[1.0, 1.0], [3.0, 3.0]])
    assert torch.allclose(compute_advantages(r), torch.tensor([[-1.0, -1.0], [1.0, 1.0]], dtype=torch.float64), atol=1e-7)


def test_token_terms_fixed_points():
    lp = torch.randn(3, 5, dtype=torch.float64)
    adv = torch.randn(3, 5, dtype=torch.float64)
    mask = torch.ones(3, 5, dtype=torch.bool)
    t = grpo_token_terms(lp, lp.clone(), lp.clone(), adv, mask, 0.2)
    assert torch.equal(t.surrogate, adv)
    assert torch.equal(t.kl, torch.zeros_like(adv))


def test_clip_branch():
    eps = 0.2
    adv = torch.tensor([[2.0]], dtype=torch.float64)
    old = torch.zeros(1, 1, dtype=torch.float64)
    new = torch.log(torch.tensor([[1 + 2 * eps]], dtype=torch.float64))
    t = grpo_token_terms(new, old, old, adv, torch.ones(1, 1, dtype=torch.bool), eps)
    assert t.surrogate.item() == pytest.approx((1 + eps) * 2.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_surrogate_is_min_of_candidates(seed):
    g = torch.Generator().manual_seed(seed)
    lp = torch.randn(4, 6, generator=g, dtype=torch.float64) * 0.5
    old = torch.randn(4, 6, generator=g, dtype=torch.float64) * 0.5
    adv = torch.randn(4, 6, generator=g, dtype=torch.float64)
    mask = torch.ones(4, 6, dtype=torch.bool)
    t = grpo_token_terms(lp, old, old, adv, mask, 0.2)
    assert torch.equal(t.surrogate, torch.minimum(t.clipped, t.unclipped))
    assert (t.surrogate <= torch.maximum(t.clipped, t.unclipped)).all()
    assert (t.kl >= 0).all()


@pytest.fixture
def rl_setup(examples):
    torch.manual_seed(0)
    model = force_one_latent_block(build_model(tiny_model_config(), seed=5, dtype=torch.float64))
    proj = build_projector(tiny_projector_config(), seed=6, dtype=torch.float64)
    ref = build_model(tiny_model_config(), seed=5, dtype=torch.float64)
    ref.load_state_dict(model.state_dict())
    cfg = RLConfig(group_size=4, questions_per_step=2, max_new_tokens=24, lr=1e-3)
    return model, proj, ref, cfg, examples[:2]


def test_zero_advantage_leaves_only_kl_gradient(rl_setup):
    model, proj, ref, cfg, exs = rl_setup
    groups = sample_groups(model, ref, proj, exs, cfg, seed=1)
    with torch.no_grad():  # make the current policy differ from the reference
        for p in model.parameters():
            p.add_(0.01 * torch.randn_like(p))
    for g in groups:
        g.advantages.zero_()
    obj, _ = grpo_objective(model, groups, exs, cfg)
    g_obj = torch.autograd.grad(obj, list(model.parameters()), allow_unused=True)

    batch, _ = _rollout_batch(model, groups, exs, V)
    lp, mask = trajectory_logprobs(model, batch)
    ref_lp = torch.cat([g.logp_ref[:, : lp.shape[1]] for g in groups])
    log_q = ref_lp - lp
    kl = torch.where(mask, log_q.exp() - log_q - 1, torch.zeros_like(lp))
    kl_only = -cfg.kl_beta * (kl.sum(1) / mask.sum(1)).mean()
    g_kl = torch.autograd.grad(kl_only, list(model.parameters()), allow_unused=True)
    for a, b in zip(g_obj, g_kl):
        if a is None or b is None:
            assert a is None and b is None
        else:
            assert torch.allclose(a, b, atol=1e-12)


def test_train_rl_keeps_projector_frozen(rl_setup, tmp_path):
    model, proj, ref, cfg, exs = rl_setup
    h0 = module_hash(proj)
    res = train_rl(exs, model, proj, cfg, Schedule(steps=3, batch_size=2, ckpt_every=3), ref_model=ref, out_dir=tmp_path)
    assert res.projector_hash_before == res.projector_hash_after == module_hash(proj) == h0
    for rec in res.history:
        assert 0 <= rec["min_total"] <= rec["max_total"] <= 3
    assert any(rec["mean_r_3d"] > 0 for rec in res.history)
    lines = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert len(lines) == 3
    assert {"step", "mean_r_3d", "mean_r_format", "mean_r_ans", "mean_total", "mean_kl", "clip_fraction", "objective"} <= set(lines[0])
    assert (tmp_path / "latest" / "manifest.json").exists()
    assert not any(p.requires_grad for p in proj.parameters())


def test_rl_resume_matches_uninterrupted(examples, tmp_path):
    def setup():
        m = force_one_latent_block(build_model(tiny_model_config(), seed=5))
        return m, build_projector(tiny_projector_config(), seed=6)

    cfg = RLConfig(group_size=2, questions_per_step=1, max_new_tokens=20, lr=1e-3)
    m1, p1 = setup()
    full = train_rl(examples[:3], m1, p1, cfg, Schedule(steps=4, batch_size=1, ckpt_every=2), out_dir=tmp_path / "a")
    m2, p2 = setup()
    ref = build_model(tiny_model_config(), seed=5)
    ref.load_state_dict(m2.state_dict())
    train_rl(examples[:3], m2, p2, cfg, Schedule(steps=2, batch_size=1, ckpt_every=2), ref_model=ref, out_dir=tmp_path / "b")
    m3, p3 = setup()
    rest = train_rl(examples[:3], m3, p3, cfg, Schedule(steps=4, batch_size=1, ckpt_every=2), ref_model=ref,
                    out_dir=tmp_path / "b", resume=tmp_path / "b" / "latest")
    strip = lambda h: {k: v for k, v in h.items() if k != "wall_time"}  # noqa: E731
    assert [strip(h) for h in rest.history] == [strip(h) for h in full.history[2:]]


def test_large_kl_weight_holds_policy_near_reference(rl_setup):
    model, proj, ref, cfg, exs = rl_setup
    from dataclasses import replace

    free = force_one_latent_block(build_model(tiny_model_config(), seed=5, dtype=torch.float64))
    free.load_state_dict(model.state_dict())
    loose = train_rl(exs, free, proj, replace(cfg, kl_beta=0.0, lr=5e-3), Schedule(steps=6, batch_size=2), ref_model=ref)
    tight = train_rl(exs, model, proj, replace(cfg, kl_beta=1e3, lr=5e-3), Schedule(steps=6, batch_size=2), ref_model=ref)
    assert max(h["mean_kl"] for h in tight.history) <= max(h["mean_kl"] for h in loose.history)


def test_non_finite_objective_dumps_state(rl_setup, tmp_path):
    model, proj, ref, cfg, exs = rl_setup
    with torch.no_grad():
        model.lm_head.weight[5, 0] = float("nan")
    with pytest.raises(NonFiniteObjective) as err:
        train_rl(exs, model, proj, cfg, Schedule(steps=2, batch_size=2), ref_model=ref, out_dir=tmp_path)
    assert err.value.step == 0
    assert (tmp_path / "nonfinite_dump" / "manifest.json").exists()
