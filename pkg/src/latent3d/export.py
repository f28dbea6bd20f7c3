"""Latent read-out for inspection: raw block states, projected features, cosine maps.

Dump files are JSON lines. The first line is the version header
``latent3d-dump/1``; every following line is one dump record whose arrays use
the shared base-64 convention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .arrays import decode_array, encode_array
from .errors import IoFailure, NoLatentBlockEmitted
from .model import SamplingSpec, TinyVLM, generate_with_latents, pixels_tensor
from .projector import Projector
from .synthetic import TrainingExample
from .teacher import teacher_features
from .trajectory import Vocab, default_vocab

DUMP_VERSION = "latent3d-dump/1"


@dataclass
class LatentDump:
    question_id: str
    trajectory_text: str
    latents: np.ndarray | None  # (k, d_model)
    projected: np.ndarray | None  # (V, P, d_teacher)
    cosine_map: np.ndarray | None  # (V, P)
    no_latent_block: bool = False
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.no_latent_block:
            return
        if self.latents is None or self.projected is None or self.cosine_map is None:
            raise ValueError("a dump with a latent block needs latents, projection and cosine map")
        if self.projected.shape[:2] != self.cosine_map.shape:
            raise ValueError(f"projection {self.projected.shape} and cosine map {self.cosine_map.shape} disagree")

    def __eq__(self, other) -> bool:
        if not isinstance(other, LatentDump):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is b
            return a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)

        return (
            self.question_id == other.question_id
            and self.trajectory_text == other.trajectory_text
            and self.no_latent_block == other.no_latent_block
            and self.metadata == other.metadata
            and same(self.latents, other.latents)
            and same(self.projected, other.projected)
            and same(self.cosine_map, other.cosine_map)
        )

    @property
    def mean_cosine(self) -> float:
        return float("nan") if self.cosine_map is None else float(self.cosine_map.mean())


def patch_cosine(projected, teacher) -> np.ndarray:
    """Cosine between matching feature vectors along the last axis.

    A zero vector on either side scores 0.
    """
    p = np.asarray(projected, dtype=np.float64)
    t = np.asarray(teacher, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    num = (p * t).sum(-1)
    den = np.linalg.norm(p, axis=-1) * np.linalg.norm(t, axis=-1)
    out = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return np.clip(out, -1.0, 1.0)


@torch.no_grad()
def extract_and_project(
    model: TinyVLM,
    projector: Projector,
    examples: Sequence[TrainingExample],
    spec: SamplingSpec = SamplingSpec(),
    vocab: Vocab | None = None,
    strict: bool = False,
    metadata: dict | None = None,
) -> list[LatentDump]:
    """Decode each example, project its latent block and compare with the teacher.

    Examples whose decoding never opens a latent block yield a flagged dump
    without features, or raise ``NoLatentBlockEmitted`` when ``strict``.
    """
    vocab = vocab or default_vocab()
    model.eval()
    projector.eval()
    dtype = model.patch_pos.dtype
    qs = [vocab.encode(ex.question.text) for ex in examples]
    px = pixels_tensor([ex.views for ex in examples], dtype)
    feats = model.encode_images(px)
    gens = generate_with_latents(model, qs, px, spec, vocab, image_features=feats)
    dumps = []
    for b, (ex, g) in enumerate(zip(examples, gens)):
        text = " ".join(vocab.itos[t] for t in g.tokens)
        if vocab.specials.latent_start not in g.tokens or g.latents.shape[0] == 0:
            if strict:
                raise NoLatentBlockEmitted(f"example {ex.uid}: decoding produced no latent block")
            dumps.append(LatentDump(ex.uid, text, None, None, None, True, dict(metadata or {})))
            continue
        proj = projector(g.latents.to(dtype), feats[b]).numpy()
        teacher = ex.teacher if ex.teacher is not None else teacher_features(ex.scene, ex.views)
        dumps.append(
            LatentDump(
                ex.uid,
                text,
                g.latents.numpy(),
                proj,
                patch_cosine(proj, teacher),
                False,
                dict(metadata or {}),
            )
        )
    return dumps


def _record(d: LatentDump) -> dict:
    enc = lambda a: None if a is None else encode_array(a)  # noqa: E731
    return {
        "question_id": d.question_id,
        "trajectory": d.trajectory_text,
        "no_latent_block": d.no_latent_block,
        "metadata": d.metadata,
        "latents": enc(d.latents),
        "projected": enc(d.projected),
        "cosine_map": enc(d.cosine_map),
    }


def serialize_dumps(dumps: Iterable[LatentDump], path) -> None:
    path = Path(path)
    try:
        with path.open("w") as fh:
            fh.write(DUMP_VERSION + "\n")
            for d in dumps:
                fh.write(json.dumps(_record(d), sort_keys=True) + "\n")
    except OSError as e:
        raise IoFailure(f"cannot write dump file {path}: {e}") from e


def serialize_dump(dump: LatentDump, path) -> None:
    serialize_dumps([dump], path)


def load_dumps(path) -> list[LatentDump]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise IoFailure(f"cannot read dump file {path}: {e}") from e
    if not lines or lines[0] != DUMP_VERSION:
        raise IoFailure(f"{path}: missing or unsupported version line")
    out = []
    for line in lines[1:]:
        if not line.strip():
            continue
        r = json.loads(line)
        dec = lambda o: None if o is None else decode_array(o)  # noqa: E731
        out.append(
            LatentDump(
                r["question_id"],
                r["trajectory"],
                dec(r["latents"]),
                dec(r["projected"]),
                dec(r["cosine_map"]),
                r["no_latent_block"],
                r["metadata"],
            )
        )
    return out
