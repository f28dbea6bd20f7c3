"""Tiny decoder-only multimodal transformer.

Input sequence layout is ``[image patches of every view] [question] [trajectory]``.
Image positions carry the ``<img>`` placeholder id and are filled with the
output of :meth:`TinyVLM.encode_images` (a linear patch embedder plus 2-D
patch-position and view-index embeddings). Latent-pad positions use the one
learned ``<|latent_pad|>`` embedding; the hidden states read there are never
fed back as inputs.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import SequenceTooLong, ShapeMismatch
from .trajectory import ReasoningTrajectory, Vocab, default_vocab


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 65
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    patch: int = 8
    image_side: int = 32
    n_views: int = 4
    max_len: int = 512
    latent_size: int = 12
    mlp_ratio: int = 4
    input_order: str = "views-then-question"
    temperature: float = 1.0
    top_k: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.latent_size < 1:
            raise ValueError("latent size must be positive")
        if self.image_side % self.patch:
            raise ValueError("patch size must divide the image side")
        if self.input_order != "views-then-question":
            raise ValueError("only views-then-question ordering is implemented")

    @property
    def patches_per_view(self) -> int:
        return (self.image_side // self.patch) ** 2

    @property
    def image_tokens(self) -> int:
        return self.n_views * self.patches_per_view

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count of :class:`TinyVLM`.

    With r the MLP ratio, each block holds (4 + 2r) d^2 + (9 + r) d weights;
    the embedders, tables, final norm and untied head add the remaining terms.
    """
    d, V, r = cfg.d_model, cfg.vocab_size, cfg.mlp_ratio
    patch = 3 * cfg.patch**2 * d + d
    tables = cfg.patches_per_view * d + cfg.n_views * d + V * d + cfg.max_len * d
    attn = 3 * d * d + 3 * d + d * d + d
    mlp = d * r * d + r * d + r * d * d + d
    block = 2 * d + attn + 2 * d + mlp
    return patch + tables + cfg.n_layers * block + 2 * d + V * d


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, cfg.mlp_ratio * d)
        self.fc2 = nn.Linear(cfg.mlp_ratio * d, d)

    def attend(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).split(D, dim=-1)
        q = q.view(B, T, h, D // h).transpose(1, 2)
        k = k.view(B, T, h, D // h).transpose(1, 2)
        v = v.view(B, T, h, D // h).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(D // h)
        att = att.masked_fill(~mask[:, None], float("-inf"))
        att = torch.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, D)
        return self.proj(y)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = x + self.attend(self.ln1(x), mask)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class TinyVLM(nn.Module):
    def __init__(self, cfg: ModelConfig, img_id: int = 1):
        super().__init__()
        self.cfg = cfg
        self.img_id = img_id
        d = cfg.d_model
        self.patch_embed = nn.Linear(3 * cfg.patch * cfg.patch, d)
        self.patch_pos = nn.Parameter(torch.zeros(cfg.patches_per_view, d))
        self.view_emb = nn.Embedding(cfg.n_views, d)
        self.tok_emb = nn.Embedding(cfg.vocab_size, d)
        self.pos_emb = nn.Embedding(cfg.max_len, d)
        self.blocks = nn.ModuleList([Block(cfg) for _ in range(cfg.n_layers)])
        self.ln_f = nn.LayerNorm(d)
        self.lm_head = nn.Linear(d, cfg.vocab_size, bias=False)
        self._init_weights()

    def _init_weights(self):
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                nn.init.zeros_(p)
            elif ".ln" in name or name.startswith("ln_"):
                nn.init.ones_(p)
            else:
                std = 0.02
                if name.endswith("proj.weight") or name.endswith("fc2.weight"):
                    std = 0.02 / math.sqrt(2 * self.cfg.n_layers)
                nn.init.normal_(p, std=std)

    # -- image encoder

    def encode_images(self, pixels: torch.Tensor) -> torch.Tensor:
        """``(B, V, 3, S, S) -> (B, V, P, d_model)``."""
        cfg = self.cfg
        if pixels.dim() != 5 or tuple(pixels.shape[2:]) != (3, cfg.image_side, cfg.image_side):
            raise ShapeMismatch(f"expected (B, V, 3, {cfg.image_side}, {cfg.image_side}), got {tuple(pixels.shape)}")
        B, V = pixels.shape[:2]
        if V > cfg.n_views:
            raise ShapeMismatch(f"{V} views exceed configured {cfg.n_views}")
        p, g = cfg.patch, cfg.image_side // cfg.patch
        x = pixels.to(self.patch_pos.dtype).reshape(B, V, 3, g, p, g, p)
        x = x.permute(0, 1, 3, 5, 2, 4, 6).reshape(B, V, g * g, 3 * p * p)
        views = torch.arange(V, device=pixels.device)
        return self.patch_embed(x) + self.patch_pos + self.view_emb(views)[None, :, None, :]

    # -- trunk

    def forward(
        self,
        ids: torch.Tensor,
        image_features: torch.Tensor,
        valid: torch.Tensor | None = None,
        positions: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(hidden, logits)`` for every position.

        ``hidden`` is the last-layer state after the final norm. ``valid`` marks
        non-padding positions; padding keys are masked out of attention.
        """
        B, T = ids.shape
        if T > self.cfg.max_len:
            raise SequenceTooLong(f"sequence of {T} tokens exceeds max_len {self.cfg.max_len}")
        if valid is None:
            valid = torch.ones_like(ids, dtype=torch.bool)
        if positions is None:
            positions = torch.arange(T, device=ids.device).expand(B, T)
        x = self.tok_emb(ids)
        img = (ids == self.img_id).unsqueeze(-1)
        feats = image_features.reshape(-1, self.cfg.d_model).to(x.dtype)
        if int(img.sum()) != feats.shape[0]:
            raise ShapeMismatch("number of <img> placeholders does not match image features")
        x = x.masked_scatter(img, feats)
        x = x + self.pos_emb(positions)
        causal = torch.ones(T, T, dtype=torch.bool, device=ids.device).tril()
        mask = causal[None] & valid[:, None, :]
        mask = mask | torch.eye(T, dtype=torch.bool, device=ids.device)[None]
        for blk in self.blocks:
            x = blk(x, mask)
        h = self.ln_f(x)
        return h, self.lm_head(h)


def build_model(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32, vocab: Vocab | None = None) -> TinyVLM:
    vocab = vocab or default_vocab()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = TinyVLM(cfg, img_id=vocab.img_id)
    return model.to(dtype)


def pixels_tensor(views_batch: Sequence[Sequence], dtype=torch.float32) -> torch.Tensor:
    """Stack ``[[ViewImage, ...], ...]`` into ``(B, V, 3, S, S)``."""
    arr = np.stack([np.stack([v.pixels for v in views]) for views in views_batch])
    return torch.from_numpy(arr).to(dtype)


# ------------------------------------------------------------------ batches


@dataclass
class SeqBatch:
    """Right-padded ``[images][question][trajectory]`` batch."""

    ids: torch.Tensor  # (B, T)
    valid: torch.Tensor  # (B, T) bool
    traj_start: list[int]  # index of the first trajectory token per row
    traj_len: list[int]
    pixels: torch.Tensor  # (B, V, 3, S, S)

    def traj_index(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Positions predicting each trajectory token, padded to the longest trajectory.

        Returns ``(pred_pos (B, L), mask (B, L))``; ``pred_pos[b, t]`` is the
        position whose logits score trajectory token ``t`` of row ``b``.
        """
        B = len(self.traj_len)
        L = max(self.traj_len) if self.traj_len else 0
        pos = torch.zeros(B, L, dtype=torch.long)
        mask = torch.zeros(B, L, dtype=torch.bool)
        for b in range(B):
            n = self.traj_len[b]
            pos[b, :n] = torch.arange(self.traj_start[b] - 1, self.traj_start[b] - 1 + n)
            mask[b, :n] = True
        return pos, mask

    def traj_tokens(self) -> torch.Tensor:
        pos, mask = self.traj_index()
        tok = torch.gather(self.ids, 1, (pos + 1).clamp(max=self.ids.shape[1] - 1))
        return torch.where(mask, tok, torch.zeros_like(tok))


def make_batch(
    questions: Sequence[Sequence[int]],
    trajectories: Sequence[Sequence[int]],
    views_batch,
    cfg: ModelConfig,
    vocab: Vocab | None = None,
    pixels: torch.Tensor | None = None,
) -> SeqBatch:
    vocab = vocab or default_vocab()
    n_img = len(views_batch[0]) * cfg.patches_per_view if pixels is None else pixels.shape[1] * cfg.patches_per_view
    rows, starts, lens = [], [], []
    for q, t in zip(questions, trajectories):
        row = [vocab.img_id] * n_img + list(q) + list(t)
        rows.append(row)
        starts.append(n_img + len(q))
        lens.append(len(t))
    T = max(len(r) for r in rows)
    if T > cfg.max_len:
        raise SequenceTooLong(f"sequence of {T} tokens exceeds max_len {cfg.max_len}")
    ids = torch.full((len(rows), T), vocab.pad_id, dtype=torch.long)
    valid = torch.zeros((len(rows), T), dtype=torch.bool)
    for b, r in enumerate(rows):
        ids[b, : len(r)] = torch.tensor(r)
        valid[b, : len(r)] = True
    if pixels is None:
        pixels = pixels_tensor(views_batch)
    return SeqBatch(ids, valid, starts, lens, pixels)


def batch_forward(model: TinyVLM, batch: SeqBatch, image_features: torch.Tensor | None = None):
    if image_features is None:
        image_features = model.encode_images(batch.pixels)
    hidden, logits = model(batch.ids, image_features, batch.valid)
    return hidden, logits, image_features


def trajectory_logprobs(model: TinyVLM, batch: SeqBatch, logits: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-token log-probabilities of every trajectory token: ``(B, L)`` plus mask."""
    if logits is None:
        _, logits, _ = batch_forward(model, batch)
    pos, mask = batch.traj_index()
    tgt = batch.traj_tokens()
    lp = torch.log_softmax(logits, dim=-1)
    sel = lp[torch.arange(lp.shape[0])[:, None], pos]  # (B, L, V)
    out = sel.gather(-1, tgt.unsqueeze(-1)).squeeze(-1)
    return torch.where(mask, out, torch.zeros_like(out)), mask


# ---------------------------------------------------------- single example


def forward_hidden(model: TinyVLM, question: Sequence[int], image_features: torch.Tensor, trajectory: Sequence[int], vocab: Vocab | None = None):
    """Hidden states and logits for one ``[images][question][trajectory]`` sequence.

    ``image_features`` is ``(V, P, d_model)``; returns ``(T, d_model)`` and ``(T, vocab)``.
    """
    vocab = vocab or default_vocab()
    n_img = image_features.shape[0] * image_features.shape[1]
    ids = torch.tensor([[vocab.img_id] * n_img + list(question) + list(trajectory)], dtype=torch.long)
    hidden, logits = model(ids, image_features.unsqueeze(0))
    return hidden[0], logits[0]


def sequence_logprobs(model: TinyVLM, question: Sequence[int], views, trajectory, vocab: Vocab | None = None) -> torch.Tensor:
    tokens = trajectory.tokens if isinstance(trajectory, ReasoningTrajectory) else list(trajectory)
    vocab = vocab or default_vocab()
    if any(t < 0 or t >= model.cfg.vocab_size for t in tokens):
        raise ShapeMismatch("trajectory token outside the vocabulary")
    batch = make_batch([question], [tokens], [views], model.cfg, vocab)
    batch.pixels = batch.pixels.to(model.patch_pos.dtype)
    lp, _ = trajectory_logprobs(model, batch)
    return lp[0]


# --------------------------------------------------------------- generation


@dataclass(frozen=True)
class SamplingSpec:
    greedy: bool = True
    temperature: float = 1.0
    top_k: int = 0
    max_new_tokens: int = 64
    seed: int = 0
    latent_size: int | None = None  # pads inserted per block; None means the model's k

    def __post_init__(self):
        if not self.greedy and self.temperature <= 0:
            raise ValueError("temperature must be positive when sampling")


@dataclass(eq=False)
class Generation:
    tokens: list[int]
    latents: torch.Tensor  # (n_latent_pad_tokens, d_model)
    complete: bool
    trajectory: ReasoningTrajectory | None = field(default=None, repr=False)

    def __eq__(self, other):
        if not isinstance(other, Generation):
            return NotImplemented
        return (
            self.tokens == other.tokens
            and self.complete == other.complete
            and self.latents.shape == other.latents.shape
            and torch.equal(self.latents, other.latents)
        )


@torch.no_grad()
def generate_with_latents(
    model: TinyVLM,
    questions: Sequence[Sequence[int]],
    pixels: torch.Tensor,
    spec: SamplingSpec = SamplingSpec(),
    vocab: Vocab | None = None,
    image_features: torch.Tensor | None = None,
) -> list[Generation]:
    """Batched decoding with latent read-out.

    Prompts are left-padded; position ids skip padding so each row computes the
    same function as an unpadded sequence. The hidden state at every position
    whose input token is ``<|latent_pad|>`` is collected as a latent row.

    Interior pads carry no language-model target, so the decoder supplies them:
    whenever a row emits ``<|latent_start|>``, the next ``k`` inputs are the pad
    embedding and the one after is ``<|latent_end|>``. A model that keeps
    re-opening blocks burns its budget and never reaches an answer.
    Decoding stops at ``</answer>`` or after ``max_new_tokens``; rows that hit the
    budget are returned with ``complete=False``.
    """
    vocab = vocab or default_vocab()
    sp = vocab.specials
    cfg = model.cfg
    B = len(questions)
    if image_features is None:
        image_features = model.encode_images(pixels.to(model.patch_pos.dtype))
    n_img = image_features.shape[1] * image_features.shape[2]
    prompts = [[vocab.img_id] * n_img + list(q) for q in questions]
    P = max(len(p) for p in prompts)
    if P + spec.max_new_tokens > cfg.max_len:
        raise SequenceTooLong(f"prompt {P} + {spec.max_new_tokens} new tokens exceeds max_len {cfg.max_len}")
    ids = torch.full((B, P), vocab.pad_id, dtype=torch.long)
    valid = torch.zeros((B, P), dtype=torch.bool)
    for b, p in enumerate(prompts):
        ids[b, P - len(p) :] = torch.tensor(p)
        valid[b, P - len(p) :] = True

    gen = torch.Generator().manual_seed(spec.seed)
    out: list[list[int]] = [[] for _ in range(B)]
    lat: list[list[torch.Tensor]] = [[] for _ in range(B)]
    done = torch.zeros(B, dtype=torch.bool)
    finished = [False] * B
    k = spec.latent_size if spec.latent_size is not None else cfg.latent_size
    queued: list[list[int]] = [[] for _ in range(B)]

    for step in range(spec.max_new_tokens + 1):
        positions = (valid.long().cumsum(1) - 1).clamp(min=0)
        hidden, logits = model(ids, image_features, valid, positions)
        last_in = ids[:, -1]
        for b in range(B):
            if step > 0 and valid[b, -1] and last_in[b].item() == sp.latent_pad:
                lat[b].append(hidden[b, -1].clone())
        if step == spec.max_new_tokens or bool(done.all()):
            break
        nxt_logits = logits[:, -1].double()
        # placeholders are input-only ids
        nxt_logits[:, [vocab.img_id, vocab.pad_id]] = float("-inf")
        if spec.greedy:
            nxt = nxt_logits.argmax(-1)
        else:
            z = nxt_logits / spec.temperature
            if spec.top_k > 0:
                kth = torch.topk(z, min(spec.top_k, z.shape[-1]), dim=-1).values[:, -1:]
                z = z.masked_fill(z < kth, float("-inf"))
            nxt = torch.multinomial(torch.softmax(z, -1), 1, generator=gen).squeeze(-1)
        for b in range(B):
            if queued[b]:
                nxt[b] = queued[b].pop(0)
            elif int(nxt[b]) == sp.latent_start:
                queued[b] = [sp.latent_pad] * k + [sp.latent_end]
        nxt = torch.where(done, torch.full_like(nxt, vocab.pad_id), nxt)
        for b in range(B):
            if not done[b]:
                out[b].append(int(nxt[b]))
                if int(nxt[b]) == sp.answer_close:
                    finished[b] = True
        ids = torch.cat([ids, nxt[:, None]], 1)
        valid = torch.cat([valid, ~done[:, None]], 1)
        done = done | (nxt == sp.answer_close)

    d = cfg.d_model
    res = []
    for b in range(B):
        L = torch.stack(lat[b]) if lat[b] else torch.zeros(0, d, dtype=image_features.dtype)
        res.append(Generation(out[b], L, finished[b]))
    return res
