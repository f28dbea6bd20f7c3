"""Stage 2: group-relative policy optimisation with latent, format and answer rewards.

Each trajectory receives one scalar reward ``r_3d + r_format + r_ans``
(weights default to 1); that scalar is assigned to every one of its tokens
and normalised within its rollout group,

    A_i = (r_i - mean(r_1..r_N)) / (std(r_1..r_N) + delta)

with the population standard deviation. The per-token objective is

    min(clip(ratio, 1 - eps, 1 + eps) * A, ratio * A) - beta * kl

where ``ratio = pi_theta / pi_old`` and ``kl = q - log q - 1`` with
``q = pi_ref / pi_theta``. Token terms are averaged per trajectory, then
over trajectories. The projector is frozen throughout.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import (
    load_module,
    load_optimizer_tensors,
    load_tensors,
    module_hash,
    optimizer_tensors,
    read_manifest,
    save_checkpoint,
)
from .errors import DegenerateVector, GroupTooSmall, MalformedLatentBlock, NonFiniteObjective
from .evaluation import extract_answer, normalize_answer, parse_number
from .model import SamplingSpec, TinyVLM, generate_with_latents, make_batch, pixels_tensor, trajectory_logprobs
from .projector import Projector
from .sft import Schedule, batch_indices, make_optimizer, OptimizerSpec
from .synthetic import TrainingExample
from .trajectory import FormatGrammar, Vocab, default_vocab, find_latent_span, validate_format

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RLConfig:
    clip_eps: float = 0.2
    kl_beta: float = 0.04
    delta: float = 1e-8
    lr: float = 1e-5
    group_size: int = 8
    questions_per_step: int = 4
    w_3d: float = 1.0
    w_format: float = 1.0
    w_ans: float = 1.0
    temperature: float = 1.0
    top_k: int = 0
    max_new_tokens: int = 64
    grad_clip: float = 1.0
    weight_decay: float = 0.0
    reference: str = "stage1"

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip epsilon must lie in (0, 1)")
        if self.kl_beta < 0:
            raise ValueError("KL weight must be non-negative")
        if self.delta <= 0:
            raise ValueError("advantage stabiliser must be positive")
        if self.group_size < 2:
            raise GroupTooSmall("rollout groups need at least two samples")


@dataclass
class RewardBreakdown:
    r_3d: float
    r_format: int
    r_ans: int
    total: float


# ----------------------------------------------------------------- rewards


def reward_3d(proj, teacher, strict: bool = False) -> float:
    """``(1 + cos(flat proj, flat teacher)) / 2``; zero-norm inputs score 0.5."""
    p = torch.as_tensor(proj, dtype=torch.float64).flatten()
    t = torch.as_tensor(teacher, dtype=torch.float64).flatten()
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(t.shape)}")
    pn, tn = torch.linalg.vector_norm(p), torch.linalg.vector_norm(t)
    if pn == 0 or tn == 0:
        if strict:
            raise DegenerateVector("cannot take the cosine of a zero vector")
        log.warning("zero-norm vector in reward_3d; returning 0.5")
        return 0.5
    cos = float(torch.dot(p, t) / (pn * tn))
    return 0.5 * (1.0 + max(-1.0, min(1.0, cos)))


def reward_format(tokens: Sequence[int], grammar: FormatGrammar) -> int:
    return int(validate_format(tokens, grammar))


def reward_answer(tokens: Sequence[int], truth, vocab: Vocab | None = None) -> int:
    vocab = vocab or default_vocab()
    text, _ = extract_answer(tokens, vocab)
    if text is None:
        return 0
    if isinstance(truth, (int, float)) and not isinstance(truth, bool):
        pred = parse_number(text)
        return int(pred is not None and abs(pred - float(truth)) <= 1e-6 * abs(float(truth)))
    return int(normalize_answer(text) == normalize_answer(str(truth)))


def compute_advantages(rewards, delta: float = 1e-8) -> torch.Tensor:
    """Group-normalise rewards along the first axis.

    ``rewards`` is ``(N,)`` (one scalar per trajectory) or ``(N, T)`` (per-token
    values at matched positions).
    """
    r = torch.as_tensor(rewards, dtype=torch.float64)
    if r.shape[0] < 2:
        raise GroupTooSmall(f"group of {r.shape[0]} trajectories; need at least 2")
    n = r.shape[0]
    # n * r - sum(r) is exact for rewards on a dyadic grid, so shifting every
    # reward by the same constant cannot change a single bit of the result
    centred = (n * r - r.sum(0, keepdim=True)) / n
    std = centred.square().mean(0, keepdim=True).sqrt()
    return centred / (std + delta)


# --------------------------------------------------------------- objective


@dataclass
class TokenTerms:
    surrogate: torch.Tensor  # (R, L) realised min(...) term
    unclipped: torch.Tensor
    clipped: torch.Tensor
    kl: torch.Tensor
    ratio: torch.Tensor
    mask: torch.Tensor


def grpo_token_terms(
    logp: torch.Tensor,
    logp_old: torch.Tensor,
    logp_ref: torch.Tensor,
    adv: torch.Tensor,
    mask: torch.Tensor,
    clip_eps: float,
) -> TokenTerms:
    ratio = torch.exp(logp - logp_old)
    unclipped = ratio * adv
    clipped = torch.clamp(ratio, 1 - clip_eps, 1 + clip_eps) * adv
    surrogate = torch.minimum(clipped, unclipped)
    log_q = logp_ref - logp
    kl = torch.exp(log_q) - log_q - 1
    zero = torch.zeros_like(surrogate)
    return TokenTerms(
        torch.where(mask, surrogate, zero),
        torch.where(mask, unclipped, zero),
        torch.where(mask, clipped, zero),
        torch.where(mask, kl, zero),
        ratio,
        mask,
    )


def grpo_objective_from_terms(terms: TokenTerms, beta: float) -> torch.Tensor:
    per_tok = terms.surrogate - beta * terms.kl
    lens = terms.mask.sum(1).clamp(min=1).to(per_tok.dtype)
    return (per_tok.sum(1) / lens).mean()


@dataclass
class RolloutGroup:
    question_id: str
    tokens: list[list[int]]
    logp_old: torch.Tensor  # (N, L)
    logp_ref: torch.Tensor  # (N, L)
    mask: torch.Tensor  # (N, L)
    latents: list[torch.Tensor]
    rewards: list[RewardBreakdown]
    advantages: torch.Tensor  # (N, L), the broadcast group-normalised reward

    @property
    def size(self) -> int:
        return len(self.tokens)


def grpo_objective(
    model: TinyVLM,
    groups: Sequence[RolloutGroup],
    examples: Sequence[TrainingExample],
    cfg: RLConfig,
    vocab: Vocab | None = None,
) -> tuple[torch.Tensor, dict]:
    """Objective J(theta) over a set of groups (one group per example), with stats."""
    vocab = vocab or default_vocab()
    batch, owner = _rollout_batch(model, groups, examples, vocab)
    logp, mask = trajectory_logprobs(model, batch)
    logp_old = torch.cat([_pad(g.logp_old, logp.shape[1]) for g in groups])
    logp_ref = torch.cat([_pad(g.logp_ref, logp.shape[1]) for g in groups])
    adv = torch.cat([_pad(g.advantages, logp.shape[1]) for g in groups]).to(logp.dtype)
    terms = grpo_token_terms(logp, logp_old.to(logp.dtype), logp_ref.to(logp.dtype), adv, mask, cfg.clip_eps)
    obj = grpo_objective_from_terms(terms, cfg.kl_beta)
    n_tok = mask.sum().clamp(min=1)
    clipped = ((terms.ratio < 1 - cfg.clip_eps) | (terms.ratio > 1 + cfg.clip_eps)) & mask
    stats = {
        "mean_kl": float(terms.kl.detach().sum() / n_tok),
        "clip_fraction": float(clipped.sum() / n_tok),
    }
    return obj, stats


def _pad(t: torch.Tensor, L: int) -> torch.Tensor:
    if t.shape[1] >= L:
        return t[:, :L]
    return torch.cat([t, torch.zeros(t.shape[0], L - t.shape[1], dtype=t.dtype)], 1)


def _rollout_batch(model, groups, examples, vocab):
    qs, trajs, views, owner = [], [], [], []
    for gi, (g, ex) in enumerate(zip(groups, examples)):
        q = vocab.encode(ex.question.text)
        for toks in g.tokens:
            qs.append(q)
            trajs.append(toks)
            views.append(ex.views)
            owner.append(gi)
    batch = make_batch(qs, trajs, views, model.cfg, vocab)
    batch.pixels = batch.pixels.to(model.patch_pos.dtype)
    return batch, owner


# ----------------------------------------------------------------- rollouts


def score_rollout(
    tokens: Sequence[int],
    latents: torch.Tensor,
    example: TrainingExample,
    projector: Projector,
    image_features: torch.Tensor,
    grammar: FormatGrammar,
    cfg: RLConfig,
    vocab: Vocab,
) -> RewardBreakdown:
    r_fmt = reward_format(tokens, grammar)
    r_ans = reward_answer(tokens, example.question.answer, vocab)
    r3 = 0.0
    try:
        span = find_latent_span(tokens, vocab.specials)
    except MalformedLatentBlock:
        span = None
    if span is not None and latents.shape[0] > 0 and example.teacher is not None:
        with torch.no_grad():
            proj = projector(latents.to(image_features.dtype), image_features)
        r3 = reward_3d(proj, example.teacher)
    total = cfg.w_3d * r3 + cfg.w_format * r_fmt + cfg.w_ans * r_ans
    return RewardBreakdown(r3, r_fmt, r_ans, total)


@torch.no_grad()
def sample_groups(
    model: TinyVLM,
    ref_model: TinyVLM,
    projector: Projector,
    examples: Sequence[TrainingExample],
    cfg: RLConfig,
    seed: int,
    vocab: Vocab | None = None,
    grammar: FormatGrammar | None = None,
) -> list[RolloutGroup]:
    vocab = vocab or default_vocab()
    grammar = grammar or FormatGrammar(vocab.specials, model.cfg.latent_size)
    N = cfg.group_size
    dtype = model.patch_pos.dtype
    model.eval()
    qs, rep = [], []
    for ex in examples:
        q = vocab.encode(ex.question.text)
        qs.extend([q] * N)
        rep.extend([ex] * N)
    px = pixels_tensor([ex.views for ex in rep], dtype)
    feats = model.encode_images(px)
    spec = SamplingSpec(greedy=False, temperature=cfg.temperature, top_k=cfg.top_k, max_new_tokens=cfg.max_new_tokens, seed=seed)
    gens = generate_with_latents(model, qs, px, spec, vocab, image_features=feats)
    batch = make_batch(qs, [g.tokens for g in gens], None, model.cfg, vocab, pixels=px)
    logp_old, mask = trajectory_logprobs(model, batch)
    logp_ref, _ = trajectory_logprobs(ref_model, batch)
    groups = []
    for gi, ex in enumerate(examples):
        sl = slice(gi * N, (gi + 1) * N)
        rewards = [
            score_rollout(g.tokens, g.latents, ex, projector, feats[gi * N + j], grammar, cfg, vocab)
            for j, g in enumerate(gens[sl])
        ]
        adv = compute_advantages([r.total for r in rewards], cfg.delta)
        m = mask[sl]
        groups.append(
            RolloutGroup(
                question_id=ex.uid,
                tokens=[g.tokens for g in gens[sl]],
                logp_old=logp_old[sl].clone(),
                logp_ref=logp_ref[sl].clone(),
                mask=m.clone(),
                latents=[g.latents for g in gens[sl]],
                rewards=rewards,
                advantages=adv[:, None].expand(N, m.shape[1]).clone() * m,
            )
        )
    return groups


# ------------------------------------------------------------------ training


@dataclass
class RLResult:
    model: TinyVLM
    history: list[dict] = field(default_factory=list)
    projector_hash_before: str = ""
    projector_hash_after: str = ""
    step: int = 0


def train_rl(
    examples: Sequence[TrainingExample],
    model: TinyVLM,
    projector: Projector,
    cfg: RLConfig = RLConfig(),
    schedule: Schedule = Schedule(steps=100, batch_size=4),
    ref_model: TinyVLM | None = None,
    out_dir=None,
    manifest: dict | None = None,
    vocab: Vocab | None = None,
    grammar: FormatGrammar | None = None,
    resume=None,
) -> RLResult:
    """Run GRPO from a stage-1 model; ``model`` is updated in place.

    The reference policy is a frozen copy of ``model`` as passed in unless
    ``ref_model`` is given. The old policy is refreshed every step, so each
    sampling round feeds exactly one gradient step. ``resume`` names a stage-2
    checkpoint whose policy weights and optimizer moments are restored.
    """
    vocab = vocab or default_vocab()
    if not examples:
        raise ValueError("dataset is empty")
    if ref_model is None:
        ref_model = copy.deepcopy(model)
    ref_model.eval()
    ref_model.requires_grad_(False)
    projector.eval()
    projector.requires_grad_(False)
    before = module_hash(projector)

    names = [f"vlm/{n}" for n, _ in model.named_parameters()]
    params = list(model.parameters())
    opt = make_optimizer(params, OptimizerSpec(lr=cfg.lr, weight_decay=cfg.weight_decay))
    total = schedule.total_steps(len(examples))
    start = 0
    if resume is not None:
        start = int(read_manifest(resume)["step"])
        load_module(model, resume, "vlm")
        load_optimizer_tensors(opt, names, load_tensors(resume, "optim"))
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = (out / "metrics.jsonl").open("a" if resume is not None else "w")
    history = []
    t0 = time.time()
    try:
        for step in range(start, total):
            idx = batch_indices(step, len(examples), cfg.questions_per_step, schedule.seed)
            chunk = [examples[i] for i in idx]
            seed = int(np.random.SeedSequence([schedule.seed, step, 17]).generate_state(1)[0])
            def fail(value):
                dump = None
                if out is not None:
                    dump = str(save_checkpoint(out / "nonfinite_dump", model, projector, dict(manifest or {}, stage="rl", step=step)))
                raise NonFiniteObjective(step, value, dump)

            try:
                groups = sample_groups(model, ref_model, projector, chunk, cfg, seed, vocab, grammar)
            except RuntimeError as e:
                # multinomial rejects nan probabilities before the objective exists
                if "inf" in str(e) or "nan" in str(e):
                    fail(float("nan"))
                raise
            model.train()
            opt.zero_grad(set_to_none=True)
            obj, stats = grpo_objective(model, groups, chunk, cfg, vocab)
            if not torch.isfinite(obj):
                fail(obj.item())
            (-obj).backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            rw = [r for g in groups for r in g.rewards]
            rec = {
                "step": step,
                "mean_r_3d": float(np.mean([r.r_3d for r in rw])),
                "mean_r_format": float(np.mean([r.r_format for r in rw])),
                "mean_r_ans": float(np.mean([r.r_ans for r in rw])),
                "mean_total": float(np.mean([r.total for r in rw])),
                "min_total": float(np.min([r.total for r in rw])),
                "max_total": float(np.max([r.total for r in rw])),
                "objective": obj.item(),
                **stats,
                "wall_time": time.time() - t0,
            }
            history.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec) + "\n")
            if out is not None and schedule.ckpt_every and ((step + 1) % schedule.ckpt_every == 0 or step + 1 == total):
                meta = dict(manifest or {}, stage="rl", step=step + 1, total_steps=total)
                save_checkpoint(out / "latest", model, projector, meta, optimizer_tensors(opt, names))
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    after = module_hash(projector)
    return RLResult(model, history, before, after, total)
