"""End-to-end runs shared by the command line and the ablation harness."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .config import RunConfig
from .evaluation import EvalReport, run_benchmark
from .model import TinyVLM, build_model
from .projector import Projector, build_projector
from .rl import RLResult, train_rl
from .sft import TrainResult, train_sft
from .synthetic import TrainingExample, build_dataset
from .teacher import GeometryTeacher
from .trajectory import FormatGrammar, default_vocab

log = logging.getLogger(__name__)


def make_splits(cfg: RunConfig) -> tuple[list[TrainingExample], list[TrainingExample]]:
    gen = cfg.generation()
    teacher = GeometryTeacher(image_side=gen.image_side)
    train = build_dataset(cfg.data.n_train, cfg.data.train_seed, gen, teacher)
    test = build_dataset(cfg.data.n_test, cfg.data.test_seed, gen, teacher)
    return train, test


def fresh_models(cfg: RunConfig, dtype=torch.float32) -> tuple[TinyVLM, Projector]:
    vocab = default_vocab()
    model = build_model(cfg.model_config(vocab), seed=cfg.seed, dtype=dtype, vocab=vocab)
    d_teacher = GeometryTeacher(image_side=cfg.data.image_side).d_teacher
    projector = build_projector(cfg.projector_config(d_teacher), seed=cfg.seed + 7919, dtype=dtype)
    return model, projector


def grammar_for(cfg: RunConfig) -> FormatGrammar:
    return FormatGrammar(default_vocab().specials, cfg.latent_size, cfg.data.latent_position)


def stage1(cfg: RunConfig, train: Sequence[TrainingExample], out_dir=None, manifest=None, resume=None) -> TrainResult:
    model, projector = fresh_models(cfg)
    return train_sft(
        train,
        model,
        projector,
        cfg.optimizer(),
        cfg.sft_schedule(),
        lambda_3d=cfg.sft.lambda_3d,
        lambda_text=cfg.sft.lambda_text,
        out_dir=out_dir,
        manifest=manifest,
        resume=resume,
    )


def stage2(
    cfg: RunConfig,
    model: TinyVLM,
    projector: Projector,
    train: Sequence[TrainingExample],
    out_dir=None,
    manifest=None,
    ref_model: TinyVLM | None = None,
) -> RLResult:
    return train_rl(
        train,
        model,
        projector,
        cfg.rl_config(),
        cfg.rl_schedule(),
        ref_model=ref_model,
        out_dir=out_dir,
        manifest=manifest,
        grammar=grammar_for(cfg),
    )


def evaluate(cfg: RunConfig, model: TinyVLM, test: Sequence[TrainingExample], metadata=None) -> EvalReport:
    meta = dict(metadata or {}, config_hash=cfg.hash())
    return run_benchmark(model, test, cfg.sampling(), metadata=meta, grammar=grammar_for(cfg))


# ----------------------------------------------------------------- ablations

AXES = {
    "latent-size": [("k=4", {"latent_size": 4}), ("k=8", {"latent_size": 8}), ("k=12", {"latent_size": 12}),
                    ("k=16", {"latent_size": 16}), ("k=32", {"latent_size": 32}), ("k=64", {"latent_size": 64})],
    "token-position": [("beginning", {"data.latent_position": "beginning"}),
                       ("middle", {"data.latent_position": "middle"}),
                       ("end", {"data.latent_position": "end"})],
    "reward-removal": [("full", {}), ("w/o r_format", {"rl.w_format": 0.0}),
                       ("w/o r_ans", {"rl.w_ans": 0.0}), ("w/o r_3D", {"rl.w_3d": 0.0})],
}


@dataclass
class AblationRow:
    label: str
    overrides: dict
    seeds: list[int]
    scores: list[float] = field(default_factory=list)
    degenerate: list[float] = field(default_factory=list)
    format_rate: list[float] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def mean_score(self) -> float:
        return float(np.mean(self.scores)) if self.scores else float("nan")

    @property
    def mean_degenerate(self) -> float:
        return float(np.mean(self.degenerate)) if self.degenerate else float("nan")


def _with(cfg: RunConfig, overrides: dict) -> RunConfig:
    from .config import apply_overrides
    import json

    return apply_overrides(cfg, [f"{k}={json.dumps(v)}" for k, v in overrides.items()])


def run_ablation(cfg: RunConfig, axis: str, seeds: Sequence[int], splits=None) -> list[AblationRow]:
    """Train and score every row of an axis under a shared seed list.

    Rows of the reward-removal axis run both stages; the other axes compare
    stage-1 models. Datasets are regenerated per row because latent size and
    token position change the reference trajectories.
    """
    from .errors import UnknownAxis

    if axis not in AXES:
        raise UnknownAxis(f"unknown ablation axis {axis!r}; choose from {', '.join(AXES)}")
    rows = []
    for label, ov in AXES[axis]:
        row = AblationRow(label, dict(ov), list(seeds))
        t0 = time.time()
        base = _with(cfg, ov)
        for seed in seeds:
            run = base.replace(seed=int(seed))
            train, test = splits(run) if splits is not None else make_splits(run)
            res = stage1(run, train)
            model = res.model
            if axis == "reward-removal":
                stage2(run, model, res.projector, train)
            rep = evaluate(run, model, test, {"ablation": axis, "row": label, "seed": int(seed)})
            row.scores.append(rep.overall)
            row.degenerate.append(rep.degenerate_rate)
            row.format_rate.append(rep.format_rate)
            log.info("%s %s seed %d: %.3f", axis, label, seed, rep.overall)
        row.seconds = time.time() - t0
        rows.append(row)
    return rows


def ablation_table(axis: str, rows: Sequence[AblationRow]) -> str:
    head = ["setting", "seeds", "score", "format"]
    if axis == "latent-size":
        head.append("degenerate")
    lines = [head]
    for r in rows:
        cells = [r.label, ",".join(map(str, r.seeds)), f"{100 * r.mean_score:.1f}", f"{100 * float(np.mean(r.format_rate)):.1f}"]
        if axis == "latent-size":
            cells.append(f"{100 * r.mean_degenerate:.1f}")
        lines.append(cells)
    w = [max(len(l[i]) for l in lines) for i in range(len(head))]
    out = ["  ".join(c.ljust(w[i]) if i == 0 else c.rjust(w[i]) for i, c in enumerate(l)) for l in lines]
    out.insert(1, "  ".join("-" * x for x in w))
    return "\n".join(out)
