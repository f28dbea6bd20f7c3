"""Stage 1: supervised alignment of latent tokens with the geometry teacher.

Losses per example:

* ``l_3d``: mean squared difference between projected latents and teacher
  features (the squared Frobenius norm divided by the element count; the
  unnormalised sum is logged alongside).
* ``l_text_pre`` / ``l_text_post``: mean cross-entropy over the trajectory
  tokens before / after the latent block. ``<|latent_start|>`` belongs to the
  pre stream and ``<|latent_end|>`` to the post stream; interior pads carry no
  cross-entropy.
* ``l_text = l_text_pre + l_text_post`` and
  ``l_total = lambda_3d * l_3d + lambda_text * l_text``.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import (
    load_module,
    load_optimizer_tensors,
    load_tensors,
    optimizer_tensors,
    read_manifest,
    save_checkpoint,
)
from .errors import MalformedLatentBlock, NonFiniteLoss, ShapeMismatch
from .model import SeqBatch, TinyVLM, make_batch, pixels_tensor
from .projector import Projector
from .synthetic import TrainingExample
from .trajectory import SpecialTokenSet, Vocab, default_vocab, find_latent_span

log = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    l_3d: float
    l_text_pre: float
    l_text_post: float
    l_text: float
    l_total: float
    lambda_3d: float
    lambda_text: float
    l_3d_sum: float = 0.0
    l_text_sum: float = 0.0

    @classmethod
    def from_parts(cls, l_3d: float, pre: float, post: float, lambda_3d: float, lambda_text: float, **raw) -> "LossBreakdown":
        l_text = pre + post
        return cls(l_3d, pre, post, l_text, lambda_3d * l_3d + lambda_text * l_text, lambda_3d, lambda_text, **raw)


# ------------------------------------------------------------------ losses


def loss_3d(proj: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    if proj.shape != teacher.shape:
        raise ShapeMismatch(f"projected {tuple(proj.shape)} vs teacher {tuple(teacher.shape)}")
    return ((proj - teacher) ** 2).mean()


def loss_3d_sum(proj: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    if proj.shape != teacher.shape:
        raise ShapeMismatch(f"projected {tuple(proj.shape)} vs teacher {tuple(teacher.shape)}")
    return ((proj - teacher) ** 2).sum()


def segment_masks(tokens: Sequence[int], specials: SpecialTokenSet) -> tuple[list[bool], list[bool]]:
    """Which trajectory tokens are supervised in the pre and post streams."""
    span = find_latent_span(tokens, specials)
    n = len(tokens)
    if span is None:
        return [True] * n, [False] * n
    s, e = span
    pre = [i <= s for i in range(n)]
    post = [i >= e for i in range(n)]
    return pre, post


def text_losses_from_logits(
    logits: torch.Tensor,
    pred_pos: torch.Tensor,
    targets: torch.Tensor,
    pre_mask: torch.Tensor,
    post_mask: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-row mean CE of the pre and post streams, plus their raw sums.

    Only positions selected by the masks are gathered, so targets elsewhere
    (latent pads, padding) cannot influence the value or its gradient.
    """
    B = logits.shape[0]
    rows = torch.arange(B)[:, None].expand_as(pred_pos)
    out = []
    for mask in (pre_mask, post_mask):
        r, c = rows[mask], pred_pos[mask]
        ce = F.cross_entropy(logits[r, c], targets[mask], reduction="none")
        sums = torch.zeros(B, dtype=logits.dtype).index_add(0, r, ce)
        counts = mask.sum(1).to(logits.dtype)
        out.append((sums / counts.clamp(min=1), sums))
    (pre, pre_sum), (post, post_sum) = out
    return pre, post, pre_sum, post_sum


@dataclass
class PreparedBatch:
    seq: SeqBatch
    pred_pos: torch.Tensor
    targets: torch.Tensor
    pre_mask: torch.Tensor
    post_mask: torch.Tensor
    latent_pos: torch.Tensor  # (B, k) sequence positions of the latent pads
    teacher: torch.Tensor | None


def prepare_batch(
    examples: Sequence[TrainingExample],
    cfg,
    vocab: Vocab | None = None,
    questions: Sequence[Sequence[int]] | None = None,
    pixels: torch.Tensor | None = None,
    dtype: torch.dtype = torch.float32,
) -> PreparedBatch:
    vocab = vocab or default_vocab()
    sp = vocab.specials
    if questions is None:
        questions = [vocab.encode(ex.question.text) for ex in examples]
    trajs = [list(ex.reference_trajectory.tokens) for ex in examples]
    seq = make_batch(questions, trajs, [ex.views for ex in examples], cfg, vocab, pixels=pixels)
    seq.pixels = seq.pixels.to(dtype)
    pred_pos, tmask = seq.traj_index()
    targets = seq.traj_tokens()
    pre = torch.zeros_like(tmask)
    post = torch.zeros_like(tmask)
    lat = []
    for b, t in enumerate(trajs):
        pm, qm = segment_masks(t, sp)
        pre[b, : len(t)] = torch.tensor(pm)
        post[b, : len(t)] = torch.tensor(qm)
        span = find_latent_span(t, sp)
        if span is None:
            raise MalformedLatentBlock(f"example {examples[b].uid} has no latent block")
        s, e = span
        lat.append([seq.traj_start[b] + i for i in range(s + 1, e)])
    if len({len(x) for x in lat}) != 1:
        raise ShapeMismatch("examples in one batch must share the latent size")
    teacher = None
    if all(ex.teacher is not None for ex in examples):
        teacher = torch.from_numpy(np.stack([ex.teacher for ex in examples])).to(dtype)
    return PreparedBatch(seq, pred_pos, targets, pre, post, torch.tensor(lat), teacher)


@dataclass
class LossTensors:
    l_3d: torch.Tensor
    l_text_pre: torch.Tensor
    l_text_post: torch.Tensor
    l_total: torch.Tensor
    l_3d_sum: torch.Tensor
    l_text_sum: torch.Tensor
    lambda_3d: float
    lambda_text: float

    def breakdown(self) -> LossBreakdown:
        return LossBreakdown.from_parts(
            self.l_3d.item(),
            self.l_text_pre.item(),
            self.l_text_post.item(),
            self.lambda_3d,
            self.lambda_text,
            l_3d_sum=self.l_3d_sum.item(),
            l_text_sum=self.l_text_sum.item(),
        )


def compute_losses(
    model: TinyVLM,
    projector: Projector,
    pb: PreparedBatch,
    lambda_3d: float = 0.1,
    lambda_text: float = 1.0,
) -> LossTensors:
    if lambda_3d < 0 or lambda_text < 0:
        raise ValueError("loss weights must be non-negative")
    feats = model.encode_images(pb.seq.pixels)
    hidden, logits = model(pb.seq.ids, feats, pb.seq.valid)
    pre, post, pre_sum, post_sum = text_losses_from_logits(logits, pb.pred_pos, pb.targets, pb.pre_mask, pb.post_mask)
    l_pre, l_post = pre.mean(), post.mean()
    B = hidden.shape[0]
    latents = hidden[torch.arange(B)[:, None], pb.latent_pos]  # (B, k, d)
    if pb.teacher is not None:
        proj = projector(latents, feats)
        l3 = loss_3d(proj, pb.teacher)
        l3_sum = loss_3d_sum(proj, pb.teacher) / B
    else:
        l3 = torch.zeros((), dtype=hidden.dtype)
        l3_sum = l3
    l_text = l_pre + l_post
    total = lambda_3d * l3 + lambda_text * l_text
    return LossTensors(l3, l_pre, l_post, total, l3_sum, (pre_sum + post_sum).mean(), lambda_3d, lambda_text)


def loss_text(example: TrainingExample, model: TinyVLM, vocab: Vocab | None = None) -> tuple[float, float]:
    pb = prepare_batch([example], model.cfg, vocab, dtype=model.patch_pos.dtype)
    feats = model.encode_images(pb.seq.pixels)
    _, logits = model(pb.seq.ids, feats, pb.seq.valid)
    pre, post, _, _ = text_losses_from_logits(logits, pb.pred_pos, pb.targets, pb.pre_mask, pb.post_mask)
    return pre.item(), post.item()


def loss_total(
    example: TrainingExample,
    model: TinyVLM,
    projector: Projector,
    lambda_3d: float = 0.1,
    lambda_text: float = 1.0,
    vocab: Vocab | None = None,
) -> LossBreakdown:
    pb = prepare_batch([example], model.cfg, vocab, dtype=model.patch_pos.dtype)
    return compute_losses(model, projector, pb, lambda_3d, lambda_text).breakdown()


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class OptimizerSpec:
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_frac: float = 0.05
    grad_clip: float = 1.0


@dataclass(frozen=True)
class Schedule:
    steps: int = 0
    epochs: int = 10
    batch_size: int = 16
    ckpt_every: int = 0
    seed: int = 0
    eval_every: int = 0

    def total_steps(self, n: int) -> int:
        if self.steps > 0:
            return self.steps
        return self.epochs * math.ceil(n / self.batch_size)


def lr_at(step: int, total: int, spec: OptimizerSpec) -> float:
    """Linear warmup over ``warmup_frac`` of the run, cosine decay to zero after."""
    warm = max(1, int(round(spec.warmup_frac * total)))
    if step < warm:
        return spec.lr * (step + 1) / warm
    prog = (step - warm) / max(1, total - warm)
    return spec.lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, prog)))


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> np.ndarray:
    """Deterministic minibatch for a global step: reshuffle per epoch, seeded by (seed, epoch)."""
    per_epoch = math.ceil(n / batch_size)
    epoch, b = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[b * batch_size : (b + 1) * batch_size]


def make_optimizer(params, spec: OptimizerSpec) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=spec.lr, betas=spec.betas, eps=spec.eps, weight_decay=spec.weight_decay)


@dataclass
class TrainResult:
    model: TinyVLM
    projector: Projector
    history: list[dict] = field(default_factory=list)
    step: int = 0


def _named_trainables(model, projector) -> tuple[list[str], list[torch.nn.Parameter]]:
    names, params = [], []
    for n, p in model.named_parameters():
        names.append(f"vlm/{n}")
        params.append(p)
    for n, p in projector.named_parameters():
        names.append(f"projector/{n}")
        params.append(p)
    return names, params


def train_sft(
    examples: Sequence[TrainingExample],
    model: TinyVLM,
    projector: Projector,
    opt_spec: OptimizerSpec = OptimizerSpec(),
    schedule: Schedule = Schedule(),
    lambda_3d: float = 0.1,
    lambda_text: float = 1.0,
    out_dir=None,
    resume: str | Path | None = None,
    manifest: dict | None = None,
    stop_after: int | None = None,
    evaluate: Callable[[TinyVLM, Projector], float] | None = None,
    vocab: Vocab | None = None,
) -> TrainResult:
    """Optimise model and projector jointly on ``l_total``.

    ``stop_after`` ends the run early (after that many global steps) while keeping
    the schedule of the full run, which is how interrupted runs are simulated.
    With ``resume`` the model, projector and optimizer moments are restored
    from the checkpoint and training continues at the next step.
    """
    if not examples:
        raise ValueError("dataset is empty")
    vocab = vocab or default_vocab()
    dtype = model.patch_pos.dtype
    n = len(examples)
    total = schedule.total_steps(n)
    names, params = _named_trainables(model, projector)
    opt = make_optimizer(params, opt_spec)
    start = 0
    if resume is not None:
        m = read_manifest(resume)
        load_module(model, resume, "vlm")
        load_module(projector, resume, "projector")
        load_optimizer_tensors(opt, names, load_tensors(resume, "optim"))
        start = int(m["step"])

    questions = [vocab.encode(ex.question.text) for ex in examples]
    pixels = pixels_tensor([ex.views for ex in examples], dtype)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = (out / "metrics.jsonl").open("a" if resume else "w")
    history: list[dict] = []
    best = -math.inf
    end = total if stop_after is None else min(total, stop_after)
    t0 = time.time()
    model.train()
    projector.train()
    try:
        for step in range(start, end):
            idx = batch_indices(step, n, schedule.batch_size, schedule.seed)
            pb = prepare_batch(
                [examples[i] for i in idx], model.cfg, vocab, [questions[i] for i in idx], pixels[idx], dtype
            )
            lr = lr_at(step, total, opt_spec)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad(set_to_none=True)
            lt = compute_losses(model, projector, pb, lambda_3d, lambda_text)
            if not torch.isfinite(lt.l_total):
                raise NonFiniteLoss(step, lt.l_total.item())
            lt.l_total.backward()
            if opt_spec.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, opt_spec.grad_clip)
            opt.step()
            rec = {"step": step, **asdict(lt.breakdown()), "lr": lr, "wall_time": time.time() - t0}
            history.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec) + "\n")
            done = step + 1
            if out is not None and schedule.ckpt_every and (done % schedule.ckpt_every == 0 or done == end):
                meta = dict(manifest or {}, stage="sft", step=done, total_steps=total)
                save_checkpoint(out / "latest", model, projector, meta, optimizer_tensors(opt, names))
                if evaluate is not None and schedule.eval_every and done % schedule.eval_every == 0:
                    score = evaluate(model, projector)
                    model.train()
                    if score > best:
                        best = score
                        save_checkpoint(out / "best", model, projector, dict(meta, eval_score=score))
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    projector.eval()
    return TrainResult(model, projector, history, end)
