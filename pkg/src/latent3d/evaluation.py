"""Held-out scoring: exact-match accuracy, Mean Relative Accuracy, reports.

MRA averages ``1[|pred - truth| / truth < 1 - theta]`` over the ten
confidence thresholds ``theta in {0.50, 0.55, ..., 0.95}``.

Multiple-choice predictions come from the generated ``<answer>`` block. When
no valid option label can be read from it (or from the last text span as a
fallback), the model is forced to answer: ``<answer>`` is appended to the
generated text (replacing anything after a generated ``<answer>``) and the
highest-scoring option label at that slot is taken.
"""

from __future__ import annotations

import json
import string
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import LengthMismatch, NonPositiveTruth
from .model import SamplingSpec, TinyVLM, generate_with_latents, make_batch, pixels_tensor
from .synthetic import KINDS, LABELS, TrainingExample
from .trajectory import FormatGrammar, Vocab, answer_text_ids, default_vocab, last_text_span, validate_format

THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

_PUNCT = string.punctuation.replace(".", "")


def normalize_answer(s: str) -> str:
    s = " ".join(str(s).split()).casefold()
    s = s.strip(_PUNCT + " ")
    return s.rstrip(".")


def parse_number(s: str) -> float | None:
    s = normalize_answer(s).replace(" ", "")
    if not s or any(c not in "0123456789." for c in s) or s.count(".") > 1 or s == ".":
        return None
    return float(s)


def exact_match_accuracy(predictions: Sequence[str], truths: Sequence[str]) -> float:
    if len(predictions) != len(truths):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(truths)} truths")
    if not truths:
        return 0.0
    hits = sum(normalize_answer(p) == normalize_answer(t) for p, t in zip(predictions, truths))
    return hits / len(truths)


def mean_relative_accuracy(pred: float, truth: float, thresholds: Sequence[float] = THRESHOLDS) -> float:
    if not truth > 0:
        raise NonPositiveTruth(f"truth must be positive, got {truth}")
    rel = abs(pred - truth) / truth
    return float(np.mean([rel < 1 - t for t in thresholds]))


@dataclass
class EvalReport:
    per_kind: dict[str, float]
    metric: dict[str, str]
    overall: float
    counts: dict[str, int]
    format_rate: float
    degenerate_rate: float
    n: int
    metadata: dict = field(default_factory=dict)
    predictions: list[dict] = field(default_factory=list)

    def to_json(self, with_predictions: bool = False) -> str:
        d = asdict(self)
        if not with_predictions:
            d.pop("predictions")
        return json.dumps(d, indent=2, sort_keys=True)

    def to_table(self) -> str:
        rows = [("kind", "metric", "n", "score")]
        for k in self.per_kind:
            rows.append((k, self.metric[k], str(self.counts[k]), f"{100 * self.per_kind[k]:.1f}"))
        rows.append(("Avg.", "", str(self.n), f"{100 * self.overall:.1f}"))
        rows.append(("format", "compliance", str(self.n), f"{100 * self.format_rate:.1f}"))
        rows.append(("degenerate", "rate", str(self.n), f"{100 * self.degenerate_rate:.1f}"))
        w = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = ["  ".join(c.ljust(w[i]) if i == 0 else c.rjust(w[i]) for i, c in enumerate(r)) for r in rows]
        lines.insert(1, "  ".join("-" * x for x in w))
        return "\n".join(lines)


def extract_answer(tokens: Sequence[int], vocab: Vocab) -> tuple[str | None, bool]:
    """Answer text from a trajectory; the flag says whether a closed answer block existed."""
    inner = answer_text_ids(tokens, vocab.specials)
    if inner is not None:
        return vocab.detokenize_text(inner), True
    span = last_text_span(tokens, vocab.specials, vocab.pad_id)
    return (vocab.detokenize_text(span) if span else None), False


@torch.no_grad()
def forced_choice(
    model: TinyVLM,
    examples: Sequence[TrainingExample],
    generated: Sequence[Sequence[int]],
    vocab: Vocab,
    questions: Sequence[Sequence[int]],
) -> list[str]:
    sp = vocab.specials
    cfg = model.cfg
    ctxs = []
    for ex, gen, q in zip(examples, generated, questions):
        gen = list(gen)
        if sp.answer_open in gen:
            gen = gen[: gen.index(sp.answer_open)]
        room = cfg.max_len - len(ex.views) * cfg.patches_per_view - len(q) - 1
        ctxs.append(gen[: max(room, 0)] + [sp.answer_open])
    batch = make_batch(questions, ctxs, [ex.views for ex in examples], cfg, vocab)
    batch.pixels = batch.pixels.to(model.patch_pos.dtype)
    _, logits = model(batch.ids, model.encode_images(batch.pixels), batch.valid)
    out = []
    for b, ex in enumerate(examples):
        last = batch.traj_start[b] + batch.traj_len[b] - 1
        labels = LABELS[: len(ex.question.options)]
        scores = logits[b, last, [vocab.stoi[l] for l in labels]]
        out.append(labels[int(scores.argmax())])
    return out


def predict(
    model: TinyVLM,
    examples: Sequence[TrainingExample],
    spec: SamplingSpec = SamplingSpec(),
    vocab: Vocab | None = None,
    batch_size: int = 128,
    grammar: FormatGrammar | None = None,
) -> list[dict]:
    vocab = vocab or default_vocab()
    model.eval()
    grammar = grammar or FormatGrammar(vocab.specials, model.cfg.latent_size)
    rows = []
    for i in range(0, len(examples), batch_size):
        chunk = examples[i : i + batch_size]
        qs = [vocab.encode(ex.question.text) for ex in chunk]
        px = pixels_tensor([ex.views for ex in chunk], model.patch_pos.dtype)
        gens = generate_with_latents(model, qs, px, spec, vocab)
        answers = [extract_answer(g.tokens, vocab) for g in gens]
        need = [
            j
            for j, (ex, (a, _)) in enumerate(zip(chunk, answers))
            if not ex.question.is_numeric and (a is None or normalize_answer(a).upper() not in LABELS[: len(ex.question.options)])
        ]
        forced = {}
        if need:
            picks = forced_choice(model, [chunk[j] for j in need], [gens[j].tokens for j in need], vocab, [qs[j] for j in need])
            forced = dict(zip(need, picks))
        for j, (ex, g) in enumerate(zip(chunk, gens)):
            text, closed = answers[j]
            pred = forced.get(j, text)
            if not ex.question.is_numeric and j not in forced:
                pred = normalize_answer(pred).upper()
            rows.append(
                {
                    "id": ex.uid,
                    "kind": ex.question.kind,
                    "truth": ex.question.answer,
                    "prediction": pred,
                    "forced": j in forced,
                    "format_ok": validate_format(g.tokens, grammar),
                    "degenerate": not closed,
                    "tokens": g.tokens,
                }
            )
    return rows


def score_rows(rows: Sequence[dict], kinds: Sequence[str] = KINDS) -> tuple[dict, dict, dict]:
    per_kind, metric, counts = {}, {}, {}
    for kind in kinds:
        sel = [r for r in rows if r["kind"] == kind]
        if not sel:
            continue
        counts[kind] = len(sel)
        if kind == "numeric-distance":
            metric[kind] = "MRA"
            vals = []
            for r in sel:
                p = parse_number(r["prediction"]) if r["prediction"] is not None else None
                vals.append(0.0 if p is None else mean_relative_accuracy(p, float(r["truth"])))
            per_kind[kind] = float(np.mean(vals))
        else:
            metric[kind] = "accuracy"
            per_kind[kind] = exact_match_accuracy([str(r["prediction"]) for r in sel], [str(r["truth"]) for r in sel])
    return per_kind, metric, counts


def run_benchmark(
    model: TinyVLM,
    examples: Sequence[TrainingExample],
    spec: SamplingSpec = SamplingSpec(),
    vocab: Vocab | None = None,
    metadata: dict | None = None,
    keep_predictions: bool = False,
    grammar: FormatGrammar | None = None,
) -> EvalReport:
    if not examples:
        raise ValueError("evaluation dataset is empty")
    rows = predict(model, examples, spec, vocab, grammar=grammar)
    per_kind, metric, counts = score_rows(rows)
    overall = float(np.mean(list(per_kind.values())))
    meta = dict(metadata or {})
    meta.setdefault("decoding", asdict(spec))
    return EvalReport(
        per_kind=per_kind,
        metric=metric,
        overall=overall,
        counts=counts,
        format_rate=float(np.mean([r["format_ok"] for r in rows])),
        degenerate_rate=float(np.mean([r["degenerate"] for r in rows])),
        n=len(rows),
        metadata=meta,
        predictions=rows if keep_predictions else [],
    )
