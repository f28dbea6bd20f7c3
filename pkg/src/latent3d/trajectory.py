"""Special-token vocabulary and the reasoning-trajectory grammar.

A trajectory is a flat sequence of token ids. The latent block
``<|latent_start|> <|latent_pad|> x k <|latent_end|>`` sits before the
``<think>`` block by default; the grammar can also be configured for the
"middle" and "end" placements used by the token-position ablation.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from typing import Sequence

from .errors import IllegalTokenInText, MalformedLatentBlock

POSITIONS = ("beginning", "middle", "end")


def _read_table(name: str) -> list[str]:
    text = resources.files("latent3d.data").joinpath(name).read_text(encoding="utf-8")
    return [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]


@dataclass(frozen=True)
class SpecialTokenSet:
    latent_start: int
    latent_pad: int
    latent_end: int
    think_open: int
    think_close: int
    answer_open: int
    answer_close: int

    def ids(self) -> tuple[int, ...]:
        return (
            self.latent_start,
            self.latent_pad,
            self.latent_end,
            self.think_open,
            self.think_close,
            self.answer_open,
            self.answer_close,
        )

    def is_special(self, tok: int) -> bool:
        return tok in self.ids()

    def is_latent(self, tok: int) -> bool:
        return tok in (self.latent_start, self.latent_pad, self.latent_end)


class Vocab:
    """Fixed word table plus the seven special tokens appended after it."""

    SPECIAL_NAMES = (
        "latent_start",
        "latent_pad",
        "latent_end",
        "think_open",
        "think_close",
        "answer_open",
        "answer_close",
    )

    def __init__(self, words: Sequence[str] | None = None, specials: Sequence[str] | None = None):
        if words is None:
            words = _read_table("vocab_v1.txt")
        if specials is None:
            rows = [ln.split() for ln in _read_table("grammar_v1.txt")]
            assert [r[0] for r in rows] == list(self.SPECIAL_NAMES)
            specials = [r[1] for r in rows]
        self.words = list(words)
        self.special_strings = list(specials)
        self.itos = self.words + self.special_strings
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate surface strings in vocabulary")
        n = len(self.words)
        self.specials = SpecialTokenSet(*range(n, n + 7))
        self.pad_id = self.stoi["<pad>"]
        self.img_id = self.stoi["<img>"]
        self.unk_id = self.stoi["<unk>"]

    @property
    def base_size(self) -> int:
        return len(self.words)

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, text: str) -> list[int]:
        # numbers are spelled digit by digit
        out = []
        for w in text.split():
            if w in self.stoi:
                out.append(self.stoi[w])
            elif all(c.isdigit() or c == "." for c in w):
                out.extend(self.stoi[c] for c in w)
            else:
                out.append(self.unk_id)
        return out

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.itos[i] if 0 <= i < len(self.itos) else "<unk>" for i in ids)

    def detokenize_text(self, ids: Sequence[int]) -> str:
        """Inverse of ``encode`` for plain text: glues digit runs back together."""
        parts: list[str] = []
        prev_num = False
        for i in ids:
            s = self.itos[i] if 0 <= i < len(self.itos) else "<unk>"
            num = s.isdigit() or s == "."
            if num and prev_num:
                parts[-1] += s
            else:
                parts.append(s)
            prev_num = num
        return " ".join(parts)


_DEFAULT_VOCAB: Vocab | None = None


def default_vocab() -> Vocab:
    global _DEFAULT_VOCAB
    if _DEFAULT_VOCAB is None:
        _DEFAULT_VOCAB = Vocab()
    return _DEFAULT_VOCAB


@dataclass(frozen=True)
class FormatGrammar:
    specials: SpecialTokenSet
    k: int
    position: str = "beginning"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("latent size k must be positive")
        if self.position not in POSITIONS:
            raise ValueError(f"unknown latent position {self.position!r}")

    def skeleton(self) -> list[int]:
        s = self.specials
        block = [s.latent_start] + [s.latent_pad] * self.k + [s.latent_end]
        tail = [s.think_close, s.answer_open, s.answer_close]
        if self.position == "beginning":
            return block + [s.think_open] + tail
        if self.position == "middle":
            return [s.think_open] + block + tail
        return [s.think_open] + tail + block

    def text_gaps(self) -> frozenset[int]:
        """Gap indices where text may appear; gap i precedes skeleton[i]."""
        k = self.k
        if self.position == "beginning":
            # before LS, LE..<think>, <think>..</think>, <answer>..</answer>
            return frozenset({0, k + 2, k + 3, k + 5})
        if self.position == "middle":
            return frozenset({0, 1, k + 3, k + 5})
        return frozenset({0, 1, 3})


@dataclass(frozen=True)
class ReasoningTrajectory:
    tokens: tuple[int, ...]
    latent_span: tuple[int, int] | None = None

    @classmethod
    def from_tokens(cls, tokens: Sequence[int], specials: SpecialTokenSet) -> "ReasoningTrajectory":
        tokens = tuple(int(t) for t in tokens)
        return cls(tokens, find_latent_span(tokens, specials))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def latent_count(self) -> int:
        if self.latent_span is None:
            return 0
        return self.latent_span[1] - self.latent_span[0] - 1


def find_latent_span(tokens: Sequence[int], specials: SpecialTokenSet) -> tuple[int, int] | None:
    """Locate the single latent block; raise if the scaffold is unbalanced."""
    starts = [i for i, t in enumerate(tokens) if t == specials.latent_start]
    ends = [i for i, t in enumerate(tokens) if t == specials.latent_end]
    pads = [i for i, t in enumerate(tokens) if t == specials.latent_pad]
    if not starts and not ends:
        if pads:
            raise MalformedLatentBlock(f"latent_pad at {pads[0]} outside a latent block")
        return None
    if len(starts) != 1 or len(ends) != 1:
        raise MalformedLatentBlock(f"{len(starts)} latent_start / {len(ends)} latent_end tokens")
    s, e = starts[0], ends[0]
    if e <= s:
        raise MalformedLatentBlock("latent_end precedes latent_start")
    if any(t != specials.latent_pad for t in tokens[s + 1 : e]):
        raise MalformedLatentBlock("non-pad token inside latent block")
    if len(pads) != e - s - 1:
        raise MalformedLatentBlock("latent_pad outside the latent block")
    return (s, e)


def decompose_trajectory(
    traj: ReasoningTrajectory | Sequence[int], specials: SpecialTokenSet
) -> tuple[list[int], list[int], list[int]]:
    tokens = list(traj.tokens if isinstance(traj, ReasoningTrajectory) else traj)
    span = find_latent_span(tokens, specials)
    if span is None:
        return tokens, [], []
    s, e = span
    return tokens[:s], tokens[s : e + 1], tokens[e + 1 :]


def compose_trajectory(
    pre: Sequence[int], k: int, post: Sequence[int], specials: SpecialTokenSet
) -> ReasoningTrajectory:
    if k < 1:
        raise ValueError("latent size k must be positive")
    for name, seg in (("pre", pre), ("post", post)):
        bad = [t for t in seg if specials.is_latent(t)]
        if bad:
            raise IllegalTokenInText(f"{name} text contains latent token {bad[0]}")
    block = [specials.latent_start] + [specials.latent_pad] * k + [specials.latent_end]
    tokens = tuple(list(pre) + block + list(post))
    return ReasoningTrajectory(tokens, (len(pre), len(pre) + k + 1))


def validate_format(traj: ReasoningTrajectory | Sequence[int], grammar: FormatGrammar) -> bool:
    tokens = traj.tokens if isinstance(traj, ReasoningTrajectory) else tuple(traj)
    skel = grammar.skeleton()
    allowed = grammar.text_gaps()
    seen = 0
    for t in tokens:
        if grammar.specials.is_special(t):
            if seen >= len(skel) or skel[seen] != t:
                return False
            seen += 1
        elif seen not in allowed:
            return False
    return seen == len(skel)


def answer_text_ids(tokens: Sequence[int], specials: SpecialTokenSet) -> list[int] | None:
    """Token ids between the first ``<answer>`` and the following ``</answer>``."""
    tokens = list(tokens)
    try:
        a = tokens.index(specials.answer_open)
        b = tokens.index(specials.answer_close, a + 1)
    except ValueError:
        return None
    inner = tokens[a + 1 : b]
    if any(specials.is_special(t) for t in inner):
        return None
    return inner


def last_text_span(tokens: Sequence[int], specials: SpecialTokenSet, pad_id: int | None = None) -> list[int]:
    """Last contiguous run of non-special tokens, used as a fallback answer."""
    run: list[int] = []
    best: list[int] = []
    for t in tokens:
        if specials.is_special(t) or t == pad_id:
            if run:
                best = run
            run = []
        else:
            run.append(t)
    return run if run else best
