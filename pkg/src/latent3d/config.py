"""Run configuration: one YAML file, dotted overrides, a stable hash.

Named presets live in ``latent3d/data/presets``. ``--config smoke`` picks a
preset; anything containing a path separator or ending in ``.yaml`` is read
from disk.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import yaml

from .errors import DataError, IoFailure
from .model import ModelConfig, SamplingSpec
from .projector import ProjectorConfig
from .rl import RLConfig
from .sft import OptimizerSpec, Schedule
from .synthetic import KINDS, GenerationConfig
from .trajectory import Vocab, default_vocab


class ConfigError(DataError):
    pass


@dataclass
class DataSection:
    n_train: int = 2000
    n_test: int = 500
    train_seed: int = 1000
    test_seed: int = 5000
    grid: int = 8
    min_objects: int = 2
    max_objects: int = 6
    z_levels: int = 4
    image_side: int = 32
    kinds: list[str] = field(default_factory=lambda: list(KINDS))
    latent_position: str = "beginning"


@dataclass
class ModelSection:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    patch: int = 8
    max_len: int = 512
    mlp_ratio: int = 4


@dataclass
class ProjectorSection:
    depth: int = 6
    hidden: int = 128
    attn_dim: int = 64


@dataclass
class SFTSection:
    lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    grad_clip: float = 1.0
    epochs: int = 10
    steps: int = 0
    batch_size: int = 16
    lambda_3d: float = 0.1
    lambda_text: float = 1.0
    ckpt_every: int = 200


@dataclass
class RLSection:
    lr: float = 1e-5
    steps: int = 100
    group_size: int = 8
    questions_per_step: int = 4
    clip_eps: float = 0.2
    kl_beta: float = 0.04
    delta: float = 1e-8
    w_3d: float = 1.0
    w_format: float = 1.0
    w_ans: float = 1.0
    temperature: float = 1.0
    top_k: int = 0
    ckpt_every: int = 50


@dataclass
class EvalSection:
    text_budget: int = 48  # decoding budget beyond the latent block
    batch_size: int = 128


@dataclass
class RunConfig:
    seed: int = 0
    latent_size: int = 12
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    projector: ProjectorSection = field(default_factory=ProjectorSection)
    sft: SFTSection = field(default_factory=SFTSection)
    rl: RLSection = field(default_factory=RLSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- serialisation

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d or {}, "")

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        return apply_overrides(self, [f"{k}={json.dumps(v)}" for k, v in changes.items()])

    # -- component configs

    def generation(self) -> GenerationConfig:
        d = self.data
        return GenerationConfig(
            grid_w=d.grid,
            grid_h=d.grid,
            min_objects=d.min_objects,
            max_objects=d.max_objects,
            z_levels=d.z_levels,
            image_side=d.image_side,
            kinds=tuple(d.kinds),
            latent_size=self.latent_size,
            latent_position=d.latent_position,
        )

    def model_config(self, vocab: Vocab | None = None) -> ModelConfig:
        vocab = vocab or default_vocab()
        m = self.model
        return ModelConfig(
            vocab_size=len(vocab),
            d_model=m.d_model,
            n_layers=m.n_layers,
            n_heads=m.n_heads,
            patch=m.patch,
            image_side=self.data.image_side,
            max_len=m.max_len,
            latent_size=self.latent_size,
            mlp_ratio=m.mlp_ratio,
        )

    def projector_config(self, d_teacher: int = 64) -> ProjectorConfig:
        p = self.projector
        return ProjectorConfig(
            depth=p.depth,
            hidden=p.hidden,
            d_model=self.model.d_model,
            d_image=self.model.d_model,
            d_teacher=d_teacher,
            attn_dim=p.attn_dim,
        )

    def optimizer(self) -> OptimizerSpec:
        s = self.sft
        return OptimizerSpec(lr=s.lr, weight_decay=s.weight_decay, warmup_frac=s.warmup_frac, grad_clip=s.grad_clip)

    def sft_schedule(self) -> Schedule:
        s = self.sft
        return Schedule(steps=s.steps, epochs=s.epochs, batch_size=s.batch_size, ckpt_every=s.ckpt_every, seed=self.seed)

    def rl_config(self) -> RLConfig:
        r = self.rl
        return RLConfig(
            clip_eps=r.clip_eps,
            kl_beta=r.kl_beta,
            delta=r.delta,
            lr=r.lr,
            group_size=r.group_size,
            questions_per_step=r.questions_per_step,
            w_3d=r.w_3d,
            w_format=r.w_format,
            w_ans=r.w_ans,
            temperature=r.temperature,
            top_k=r.top_k,
            max_new_tokens=self.decode_budget(),
        )

    def rl_schedule(self) -> Schedule:
        r = self.rl
        return Schedule(steps=r.steps, batch_size=r.questions_per_step, ckpt_every=r.ckpt_every, seed=self.seed)

    def decode_budget(self) -> int:
        return self.latent_size + 2 + self.eval.text_budget

    def sampling(self, seed: int | None = None) -> SamplingSpec:
        return SamplingSpec(greedy=True, max_new_tokens=self.decode_budget(), seed=self.seed if seed is None else seed)


def _build(cls, d: dict, prefix: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section {prefix or '<root>'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(prefix + k for k in unknown))}")
    kwargs = {}
    for name, val in d.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), val, f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(val, default, prefix + name)
    return cls(**kwargs)


def _coerce(val, default, key):
    if isinstance(default, bool):
        if not isinstance(val, bool):
            raise ConfigError(f"{key}: expected a boolean, got {val!r}")
        return val
    if isinstance(default, int):
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"{key}: expected an integer, got {val!r}")
        return val
    if isinstance(default, float):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {val!r}")
        return float(val)
    if isinstance(default, list):
        if not isinstance(val, list):
            raise ConfigError(f"{key}: expected a list, got {val!r}")
        return list(val)
    if isinstance(default, str) and not isinstance(val, str):
        raise ConfigError(f"{key}: expected a string, got {val!r}")
    return val


def apply_overrides(cfg: RunConfig, overrides: Sequence[str]) -> RunConfig:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    d = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return RunConfig.from_dict(d)


def preset_names() -> list[str]:
    root = resources.files("latent3d") / "data" / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_config(source: str | Path | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    if source is None:
        cfg = RunConfig()
    else:
        s = str(source)
        if s.endswith((".yaml", ".yml")) or "/" in s:
            try:
                text = Path(s).read_text()
            except OSError as e:
                raise IoFailure(f"cannot read config {s}: {e}") from e
        elif s in preset_names():
            text = (resources.files("latent3d") / "data" / "presets" / f"{s}.yaml").read_text()
        else:
            raise ConfigError(f"no config file or preset named {s!r} (presets: {', '.join(preset_names())})")
        try:
            cfg = RunConfig.from_dict(yaml.safe_load(text) or {})
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse config {s}: {e}") from e
    return apply_overrides(cfg, overrides)


def write_effective(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(f"# config hash {cfg.hash()}\n" + cfg.to_yaml())
    return path
