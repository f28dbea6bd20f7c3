"""Toy geometry teacher standing in for a frozen 3D foundation model.

Each image patch is assigned the object owning most of its visible pixels
(ties go to the lower object index). Its feature is a sinusoidal encoding of
that object's world position on a ladder of octaves,

    enc(c) = [sin(w_0 c) .. sin(w_7 c), cos(w_0 c) .. cos(w_7 c)],  w_j = 2**j * pi / 32,

applied to the cell centre ``(x + 0.5, y + 0.5)`` and the height level ``z``,
followed by a one-hot of the (shape, color) class. Empty patches encode to
all zeros. The final feature is ``raw + baseline`` with a constant offset of
0.05 per channel, so no patch feature is the zero vector (norm bounds: empty
patches 0.4, occupied patches about 5.3).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ViewSceneMismatch
from .synthetic import COLORS, SHAPES, VIEWS, GridScene, ViewImage, render_with_ids


@dataclass(frozen=True)
class TeacherSpec:
    image_side: int = 32
    patch: int = 8
    octaves: int = 8
    base_freq: float = np.pi / 32
    baseline: float = 0.05

    @property
    def geometry_width(self) -> int:
        return 3 * 2 * self.octaves

    @property
    def d_teacher(self) -> int:
        return self.geometry_width + len(SHAPES) * len(COLORS)

    @property
    def patches_per_view(self) -> int:
        return (self.image_side // self.patch) ** 2


def encode_position(xyz: np.ndarray, spec: TeacherSpec = TeacherSpec()) -> np.ndarray:
    """Sinusoidal encoding of world coordinates ``(..., 3) -> (..., 6 * octaves)``."""
    xyz = np.asarray(xyz, np.float64)
    freqs = spec.base_freq * (2.0 ** np.arange(spec.octaves))
    ang = xyz[..., :, None] * freqs  # (..., 3, octaves)
    enc = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return enc.reshape(*xyz.shape[:-1], -1)


def object_feature(obj, spec: TeacherSpec = TeacherSpec()) -> np.ndarray:
    geo = encode_position(np.array([obj.x + 0.5, obj.y + 0.5, float(obj.z)]), spec)
    onehot = np.zeros(len(SHAPES) * len(COLORS))
    onehot[SHAPES.index(obj.shape) * len(COLORS) + COLORS.index(obj.color)] = 1.0
    return np.concatenate([geo, onehot])


def patch_owners(ids: np.ndarray, patch: int) -> np.ndarray:
    """Dominant object index per patch (row-major), -1 for empty patches."""
    side = ids.shape[0]
    g = side // patch
    out = np.full(g * g, -1, np.int64)
    for pr in range(g):
        for pc in range(g):
            block = ids[pr * patch : (pr + 1) * patch, pc * patch : (pc + 1) * patch]
            vals = block[block >= 0]
            if vals.size:
                counts = np.bincount(vals)
                out[pr * g + pc] = int(np.argmax(counts))  # argmax keeps the lowest index on ties
    return out


def patch_coverage(ids: np.ndarray, patch: int, obj: int) -> np.ndarray:
    side = ids.shape[0]
    g = side // patch
    blocks = ids.reshape(g, patch, g, patch).transpose(0, 2, 1, 3).reshape(g * g, -1)
    return (blocks == obj).any(axis=1)


def teacher_features(
    scene: GridScene, views: Sequence[ViewImage], spec: TeacherSpec = TeacherSpec()
) -> np.ndarray:
    feats = np.zeros((len(views), spec.patches_per_view, spec.d_teacher), np.float64)
    table = np.stack([object_feature(o, spec) for o in scene.objects]) if scene.objects else None
    for vi, view in enumerate(views):
        if view.view_id not in VIEWS:
            raise ViewSceneMismatch(f"view {view.view_id!r} is not a rendered view id")
        pixels, ids = render_with_ids(scene, view.view_id, spec.image_side)
        if view.pixels.shape != pixels.shape or not np.array_equal(view.pixels, pixels):
            raise ViewSceneMismatch(f"view {view.view_id!r} was not rendered from this scene")
        owners = patch_owners(ids, spec.patch)
        occupied = owners >= 0
        if occupied.any():
            feats[vi, occupied] = table[owners[occupied]]
    return (feats + spec.baseline).astype(np.float32)


class GeometryTeacher:
    """Callable ``(scene, views) -> (n_views, P, d_teacher)`` feature provider."""

    def __init__(self, spec: TeacherSpec | None = None, image_side: int | None = None):
        if spec is None:
            spec = TeacherSpec(image_side=image_side or 32)
        self.spec = spec

    @property
    def d_teacher(self) -> int:
        return self.spec.d_teacher

    def __call__(self, scene: GridScene, views: Sequence[ViewImage]) -> np.ndarray:
        return teacher_features(scene, views, self.spec)
