"""Projector from latent hidden states into the teacher feature space.

For every image patch, a single attention head pools the k latent rows using
the patch feature as the query. The pooled summary is concatenated with the
patch feature and passed through an MLP of ``depth`` linear layers: an input
layer, hidden layers grouped into residual pairs, and an output layer whose
weights start at zero.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatch


@dataclass(frozen=True)
class ProjectorConfig:
    depth: int = 6
    hidden: int = 128
    d_model: int = 128
    d_image: int = 128
    d_teacher: int = 64
    attn_dim: int = 64
    fusion: str = "patch-query-attention-pool"
    zero_init_final: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("projector depth must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class Projector(nn.Module):
    def __init__(self, cfg: ProjectorConfig):
        super().__init__()
        self.cfg = cfg
        a = cfg.attn_dim
        self.q = nn.Linear(cfg.d_image, a, bias=False)
        self.k = nn.Linear(cfg.d_model, a, bias=False)
        self.v = nn.Linear(cfg.d_model, a, bias=False)
        d_in = cfg.d_image + a
        if cfg.depth == 1:
            self.layers = nn.ModuleList([nn.Linear(d_in, cfg.d_teacher)])
        else:
            dims = [d_in] + [cfg.hidden] * (cfg.depth - 1) + [cfg.d_teacher]
            self.layers = nn.ModuleList(nn.Linear(dims[i], dims[i + 1]) for i in range(cfg.depth))
        self.reset_parameters()

    def reset_parameters(self):
        # fan-in scaled normal init; the caller seeds the RNG
        for lin in [self.q, self.k, self.v, *self.layers]:
            nn.init.normal_(lin.weight, std=1.0 / math.sqrt(lin.in_features))
            if lin.bias is not None:
                nn.init.zeros_(lin.bias)
        if self.cfg.zero_init_final:
            nn.init.zeros_(self.layers[-1].weight)

    def forward(self, latents: torch.Tensor, image_features: torch.Tensor) -> torch.Tensor:
        """``latents (..., k, d_model)`` and ``image_features (..., V, P, d_image)`` -> ``(..., V, P, d_teacher)``."""
        if latents.shape[-1] != self.cfg.d_model or image_features.shape[-1] != self.cfg.d_image:
            raise ShapeMismatch(
                f"projector expects widths ({self.cfg.d_model}, {self.cfg.d_image}), "
                f"got ({latents.shape[-1]}, {image_features.shape[-1]})"
            )
        if latents.shape[-2] < 1:
            raise ShapeMismatch("projector needs at least one latent row")
        lead = image_features.shape[:-3]
        V, P, Di = image_features.shape[-3:]
        img = image_features.reshape(*lead, V * P, Di)
        q = self.q(img)  # (..., VP, a)
        k = self.k(latents)  # (..., k, a)
        v = self.v(latents)
        w = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.cfg.attn_dim), dim=-1)
        x = torch.cat([img, w @ v], dim=-1)

        layers = self.layers
        if len(layers) == 1:
            out = layers[0](x)
        else:
            x = layers[0](x)
            hidden = list(layers[1:-1])
            for i in range(0, len(hidden), 2):
                pair = hidden[i : i + 2]
                y = x
                for lin in pair:
                    y = lin(F.gelu(y))
                x = x + y
            out = layers[-1](F.gelu(x))
        return out.reshape(*lead, V, P, self.cfg.d_teacher)


def build_projector(cfg: ProjectorConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> Projector:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        proj = Projector(cfg)
    return proj.to(dtype)


def project_latents(projector: Projector, latents: torch.Tensor, image_features: torch.Tensor) -> torch.Tensor:
    k = latents.shape[-2]
    if k < 1:
        raise ShapeMismatch("no latent rows to project")
    return projector(latents, image_features)
