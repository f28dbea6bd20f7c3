"""Procedural multi-view spatial scenes, questions and reference trajectories.

World frame: ``x`` grows to the east, ``y`` grows to the north, ``z`` is the
height of an object above the ground in integer levels. Each of the four
cameras sits on one side of the grid and looks across it, so the north view
faces south and its screen-right points west.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .arrays import decode_array, encode_array
from .errors import CorruptRecord, InfeasibleConfig, UnsupportedKindForScene
from .trajectory import (
    ReasoningTrajectory,
    Vocab,
    compose_trajectory,
    default_vocab,
)

GENERATOR_VERSION = "latent3d-synthetic/1"

SHAPES = ("cube", "sphere", "cone", "cylinder")
COLORS = ("red", "green", "blue", "yellow")
VIEWS = ("north", "east", "south", "west")
AZIMUTH = {"north": 0.0, "east": 90.0, "south": 180.0, "west": 270.0}
KINDS = ("relative-direction", "rotation", "count", "numeric-distance")
MC_KINDS = ("relative-direction", "rotation", "count")
RELATIONS = ("left of", "right of", "in front of", "behind")
LABELS = ("A", "B", "C", "D")

# facing direction of each camera in world coordinates
FACING = {"north": (0, -1), "east": (-1, 0), "south": (0, 1), "west": (1, 0)}

RGB = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.75, 0.2),
    "blue": (0.15, 0.25, 0.9),
    "yellow": (0.95, 0.85, 0.1),
}
SKY = (0.85, 0.85, 0.9)
GROUND = (0.45, 0.45, 0.45)


@dataclass(frozen=True)
class GenerationConfig:
    grid_w: int = 8
    grid_h: int = 8
    min_objects: int = 2
    max_objects: int = 6
    z_levels: int = 4
    image_side: int = 32
    views: tuple[str, ...] = VIEWS
    kinds: tuple[str, ...] = KINDS
    latent_size: int = 12
    latent_position: str = "beginning"

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    x: int
    y: int
    z: int

    @property
    def name(self) -> str:
        return f"{self.color} {self.shape}"


@dataclass(frozen=True)
class GridScene:
    width: int
    height: int
    objects: tuple[SceneObject, ...]

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "objects": [asdict(o) for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "GridScene":
        return cls(int(d["width"]), int(d["height"]), tuple(SceneObject(**o) for o in d["objects"]))


@dataclass(eq=False)
class ViewImage:
    pixels: np.ndarray  # (3, S, S) float32 in [0, 1]
    view_id: str
    azimuth: float

    def __eq__(self, other):
        if not isinstance(other, ViewImage):
            return NotImplemented
        return (
            self.view_id == other.view_id
            and self.azimuth == other.azimuth
            and self.pixels.dtype == other.pixels.dtype
            and np.array_equal(self.pixels, other.pixels)
        )


@dataclass
class SpatialQuestion:
    kind: str
    text: str
    options: list[str] | None
    answer: str | float
    meta: dict = field(default_factory=dict)

    @property
    def is_numeric(self) -> bool:
        return self.options is None


@dataclass(eq=False)
class TrainingExample:
    question: SpatialQuestion
    views: list[ViewImage]
    reference_trajectory: ReasoningTrajectory
    scene: GridScene
    teacher: np.ndarray | None = None
    uid: str = ""

    def __eq__(self, other):
        if not isinstance(other, TrainingExample):
            return NotImplemented
        if (self.teacher is None) != (other.teacher is None):
            return False
        if self.teacher is not None and not np.array_equal(self.teacher, other.teacher):
            return False
        return (
            self.uid == other.uid
            and self.question == other.question
            and self.views == other.views
            and self.reference_trajectory == other.reference_trajectory
            and self.scene == other.scene
        )


# ---------------------------------------------------------------- scenes


def generate_scene(seed: int, config: GenerationConfig = GenerationConfig()) -> GridScene:
    cells = config.grid_w * config.grid_h
    if config.min_objects > config.max_objects or config.z_levels < 1:
        raise InfeasibleConfig("empty object-count or height range")
    if config.max_objects > cells:
        raise InfeasibleConfig(f"{config.max_objects} objects cannot fit in {cells} cells")
    if config.min_objects < 2 or config.max_objects > 6:
        raise InfeasibleConfig("scenes hold between 2 and 6 objects")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    cell_ids = rng.choice(cells, size=n, replace=False)
    kinds = rng.choice(len(SHAPES) * len(COLORS), size=n, replace=False)
    zs = rng.integers(0, config.z_levels, size=n)
    objs = tuple(
        SceneObject(
            shape=SHAPES[int(d) // len(COLORS)],
            color=COLORS[int(d) % len(COLORS)],
            x=int(c) % config.grid_w,
            y=int(c) // config.grid_w,
            z=int(z),
        )
        for c, d, z in zip(cell_ids, kinds, zs)
    )
    return GridScene(config.grid_w, config.grid_h, objs)


def view_frame(view: str, scene: GridScene) -> Callable[[int, int], tuple[int, int, int, int]]:
    """Return ``(x, y) -> (lateral index, depth index, lateral count, depth count)``.

    Lateral index grows to screen-right; depth index 0 is the row nearest the camera.
    """
    W, H = scene.width, scene.height
    if view == "north":
        return lambda x, y: (W - 1 - x, H - 1 - y, W, H)
    if view == "south":
        return lambda x, y: (x, y, W, H)
    if view == "east":
        return lambda x, y: (y, W - 1 - x, H, W)
    if view == "west":
        return lambda x, y: (H - 1 - y, x, H, W)
    raise ValueError(f"unknown view {view!r}")


def _glyph_mask(shape: str, h: int, w: int) -> np.ndarray:
    v, u = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    if shape == "cube":
        return np.ones((h, w), bool)
    if shape == "sphere":
        return (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    if shape == "cone":
        return np.abs(u - 0.5) <= 0.5 * v + 1e-9
    if shape == "cylinder":
        return np.abs(u - 0.5) <= 0.3
    raise ValueError(shape)


def render_with_ids(scene: GridScene, view: str, side: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Render one view and the per-pixel owning object index (-1 for background)."""
    horizon = int(round(side * 0.4))
    img = np.empty((3, side, side), np.float32)
    img[:, :horizon, :] = np.asarray(SKY, np.float32)[:, None, None]
    img[:, horizon:, :] = np.asarray(GROUND, np.float32)[:, None, None]
    ids = np.full((side, side), -1, np.int64)
    frame = view_frame(view, scene)

    placed = []
    for idx, o in enumerate(scene.objects):
        lat, dep, L, D = frame(o.x, o.y)
        cell = side / L
        t = dep / (D - 1) if D > 1 else 0.0
        size = cell * (1.5 - 1.0 * t)
        cx = (lat + 0.5) * cell
        base = (side - 1) - t * (side - 1 - horizon)
        bottom = base - o.z * size * 0.75
        placed.append((dep, idx, o, cx, bottom, size))
    # painter's order: far rows first, ties by object index
    placed.sort(key=lambda p: (-p[0], p[1]))
    for _, idx, o, cx, bottom, size in placed:
        c0 = int(math.ceil(cx - size / 2 - 0.5))
        c1 = int(math.ceil(cx + size / 2 - 0.5))
        r0 = int(math.ceil(bottom - size - 0.5))
        r1 = int(math.ceil(bottom - 0.5))
        h, w = r1 - r0, c1 - c0
        mask = _glyph_mask(o.shape, max(h, 1), max(w, 1))
        mask[mask.shape[0] // 2, mask.shape[1] // 2] = True
        rr, cc = np.nonzero(mask)
        rr = rr + r0
        cc = cc + c0
        keep = (rr >= 0) & (rr < side) & (cc >= 0) & (cc < side)
        rr, cc = rr[keep], cc[keep]
        img[:, rr, cc] = np.asarray(RGB[o.color], np.float32)[:, None]
        ids[rr, cc] = idx
    return img, ids


def render_views(scene: GridScene, view_ids: Sequence[str] = VIEWS, side: int = 32) -> list[ViewImage]:
    if not view_ids:
        raise ValueError("at least one view id is required")
    out = []
    for v in view_ids:
        if v not in VIEWS:
            raise ValueError(f"unknown view {v!r}")
        pixels, _ = render_with_ids(scene, v, side)
        out.append(ViewImage(pixels, v, AZIMUTH[v]))
    return out


# ------------------------------------------------------------- questions


def relation(view: str, a: SceneObject, b: SceneObject) -> str | None:
    """Where ``a`` sits relative to ``b`` as seen from ``view``; None on a diagonal tie."""
    fx, fy = FACING[view]
    rx, ry = fy, -fx
    dx, dy = a.x - b.x, a.y - b.y
    lat = dx * rx + dy * ry
    fwd = dx * fx + dy * fy
    if abs(lat) > abs(fwd):
        return "right of" if lat > 0 else "left of"
    if abs(fwd) > abs(lat):
        return "behind" if fwd > 0 else "in front of"
    return None


def _shuffled_options(rng: np.random.Generator, correct: str, distractors: Sequence[str]) -> tuple[list[str], str]:
    opts = [correct] + list(distractors)
    order = rng.permutation(len(opts))
    opts = [opts[i] for i in order]
    return opts, LABELS[opts.index(correct)]


def _options_text(opts: Sequence[str]) -> str:
    return " ".join(f"{LABELS[i]} {o}" for i, o in enumerate(opts))


def generate_question_answer(scene: GridScene, kind: str, seed: int) -> SpatialQuestion:
    rng = np.random.default_rng(seed)
    objs = scene.objects
    if kind not in KINDS:
        raise UnsupportedKindForScene(f"unknown question kind {kind!r}")
    if kind == "count":
        n = len(objs)
        pool = [c for c in range(1, 10) if c != n]
        distract = [str(c) for c in rng.choice(pool, size=3, replace=False)]
        opts, label = _shuffled_options(rng, str(n), distract)
        text = "how many objects are in the scene ? " + _options_text(opts)
        return SpatialQuestion(kind, text, opts, label, {"count": n})
    if len(objs) < 2:
        raise UnsupportedKindForScene(f"{kind} needs at least two objects")
    pairs = [(i, j) for i in range(len(objs)) for j in range(len(objs)) if i != j]

    if kind == "numeric-distance":
        i, j = pairs[int(rng.integers(len(pairs)))]
        a, b = objs[i], objs[j]
        dist = round(math.hypot(a.x - b.x, a.y - b.y), 2)
        text = f"how far is the {a.name} from the {b.name} ?"
        return SpatialQuestion(kind, text, None, dist, {"pair": [i, j]})

    usable = [(i, j) for i, j in pairs if relation("north", objs[i], objs[j]) is not None]
    if not usable:
        raise UnsupportedKindForScene(f"every object pair is on a diagonal; {kind} is ambiguous")
    i, j = usable[int(rng.integers(len(usable)))]
    a, b = objs[i], objs[j]
    if kind == "relative-direction":
        view = VIEWS[int(rng.integers(len(VIEWS)))]
        rel = relation(view, a, b)
        opts, label = _shuffled_options(rng, rel, [r for r in RELATIONS if r != rel])
        text = f"from the {view} view , where is the {a.name} relative to the {b.name} ? " + _options_text(opts)
        return SpatialQuestion(kind, text, opts, label, {"pair": [i, j], "view": view, "relation": rel})
    # rotation: which camera shows the requested relation
    rel = RELATIONS[int(rng.integers(len(RELATIONS)))]
    view = next(v for v in VIEWS if relation(v, a, b) == rel)
    opts, label = _shuffled_options(rng, view, [v for v in VIEWS if v != view])
    text = f"in which view is the {a.name} {rel} the {b.name} ? " + _options_text(opts)
    return SpatialQuestion(kind, text, opts, label, {"pair": [i, j], "view": view, "relation": rel})


def answer_text(question: SpatialQuestion) -> str:
    if question.is_numeric:
        return f"{float(question.answer):.2f}"
    return str(question.answer)


def think_text(question: SpatialQuestion, scene: GridScene) -> str:
    objs = scene.objects
    if question.kind == "count":
        listed = sorted(objs, key=lambda o: (-o.y, o.x))
        return "objects : " + " , ".join(o.name for o in listed) + f" . total {len(objs)}"
    i, j = question.meta["pair"]
    a, b = objs[i], objs[j]
    where = f"{a.name} at {a.x} {a.y} , {b.name} at {b.x} {b.y} ,"
    if question.kind == "numeric-distance":
        return f"{where} dx {abs(a.x - b.x)} dy {abs(a.y - b.y)}"
    if question.kind == "relative-direction":
        return f"{where} {question.meta['view']} view : {question.meta['relation']}"
    return f"{where} {question.meta['relation']} in {question.meta['view']} view"


def synthesize_cot(
    question: SpatialQuestion,
    scene: GridScene,
    k: int,
    vocab: Vocab | None = None,
    position: str = "beginning",
) -> ReasoningTrajectory:
    vocab = vocab or default_vocab()
    s = vocab.specials
    think = vocab.encode(think_text(question, scene))
    ans = vocab.encode(answer_text(question))
    tail = [s.think_close, s.answer_open] + ans + [s.answer_close]
    if position == "beginning":
        return compose_trajectory([], k, [s.think_open] + think + tail, s)
    if position == "middle":
        half = len(think) // 2
        return compose_trajectory([s.think_open] + think[:half], k, think[half:] + tail, s)
    if position == "end":
        return compose_trajectory([s.think_open] + think + tail, k, [], s)
    raise ValueError(f"unknown latent position {position!r}")


# --------------------------------------------------------------- dataset


def example_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def make_example(
    seed: int,
    index: int,
    config: GenerationConfig = GenerationConfig(),
    teacher: Callable | None = None,
    vocab: Vocab | None = None,
) -> TrainingExample:
    kind = config.kinds[index % len(config.kinds)]
    base = example_seed(seed, index)
    for attempt in range(100):
        scene = generate_scene(base + attempt, config)
        try:
            q = generate_question_answer(scene, kind, base + attempt)
            break
        except UnsupportedKindForScene:
            continue
    else:
        raise InfeasibleConfig(f"no usable scene for {kind} after 100 attempts")
    views = render_views(scene, config.views, config.image_side)
    traj = synthesize_cot(q, scene, config.latent_size, vocab, config.latent_position)
    feats = None
    if teacher is not None:
        feats = np.asarray(teacher(scene, views), np.float32)
    return TrainingExample(q, views, traj, scene, feats, uid=f"{seed}-{index}")


def build_dataset(
    n: int,
    seed: int,
    config: GenerationConfig = GenerationConfig(),
    teacher: Callable | None = "default",
    vocab: Vocab | None = None,
    start: int = 0,
) -> list[TrainingExample]:
    if teacher == "default":
        from .teacher import GeometryTeacher

        teacher = GeometryTeacher(image_side=config.image_side)
    return [make_example(seed, i, config, teacher, vocab) for i in range(start, start + n)]


def balance_audit(examples: Iterable[TrainingExample]) -> dict[str, int]:
    counts = {lab: 0 for lab in LABELS}
    for ex in examples:
        if not ex.question.is_numeric:
            counts[str(ex.question.answer)] += 1
    return counts


def _to_record(ex: TrainingExample) -> dict:
    q = ex.question
    return {
        "id": ex.uid,
        "kind": q.kind,
        "question": q.text,
        "options": q.options,
        "answer": q.answer,
        "meta": q.meta,
        "views": [{"view_id": v.view_id, "azimuth": v.azimuth, "pixels": encode_array(v.pixels)} for v in ex.views],
        "trajectory": list(ex.reference_trajectory.tokens),
        "latent_span": list(ex.reference_trajectory.latent_span) if ex.reference_trajectory.latent_span else None,
        "scene": ex.scene.to_dict(),
        "teacher": encode_array(ex.teacher) if ex.teacher is not None else None,
    }


def _from_record(r: dict) -> TrainingExample:
    q = SpatialQuestion(r["kind"], r["question"], r["options"], r["answer"], r["meta"])
    views = [ViewImage(decode_array(v["pixels"]), v["view_id"], float(v["azimuth"])) for v in r["views"]]
    span = tuple(r["latent_span"]) if r["latent_span"] is not None else None
    traj = ReasoningTrajectory(tuple(int(t) for t in r["trajectory"]), span)
    teacher = decode_array(r["teacher"]) if r["teacher"] is not None else None
    return TrainingExample(q, views, traj, GridScene.from_dict(r["scene"]), teacher, r["id"])


def write_dataset(examples: Sequence[TrainingExample], path, manifest: dict | None = None) -> None:
    path = Path(path)
    head = {"generator_version": GENERATOR_VERSION, "count": len(examples)}
    head.update(manifest or {})
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"manifest": head}, sort_keys=True) + "\n")
        for ex in examples:
            fh.write(json.dumps(_to_record(ex), sort_keys=True) + "\n")


def read_dataset_with_manifest(path) -> tuple[dict | None, list[TrainingExample]]:
    manifest = None
    out: list[TrainingExample] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorruptRecord(lineno, str(e)) from None
            if lineno == 1 and isinstance(rec, dict) and "manifest" in rec:
                manifest = rec["manifest"]
                continue
            try:
                out.append(_from_record(rec))
            except (KeyError, TypeError, ValueError) as e:
                raise CorruptRecord(lineno, repr(e)) from None
    return manifest, out


def read_dataset(path) -> list[TrainingExample]:
    return read_dataset_with_manifest(path)[1]
