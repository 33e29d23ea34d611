"""Weak and strong views of an unlabeled sentence.

The weak view never changes the token surface: the only noise it sees is the
model's own dropout at forward time, which keeps its pseudo-labels stable.
Strong views perturb the surface. Only content positions are eligible;
anything flagged special (including [UNK]) is left alone.

All counts use round-half-up so ratios behave predictably at small lengths
(Python's round() would send 4.5 to 4).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .rng import RngStream
from .tokenizer import MASK_ID, TokenSequence

KINDS = ("dropout", "crop", "swap", "deletion", "mask")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class AugmentKind:
    """Which strong view to use, with its knobs."""

    kind: str
    mask_ratio: float = 0.15
    keep_ratio: float = 0.85
    swap_repeats: int = 3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation {self.kind!r}; choose from {KINDS}")
        if not 0.0 < self.mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio must be in (0, 1], got {self.mask_ratio}")
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ValueError(f"keep_ratio must be in (0, 1], got {self.keep_ratio}")
        if self.swap_repeats < 1:
            raise ValueError(f"swap_repeats must be >= 1, got {self.swap_repeats}")

    @classmethod
    def from_name(cls, name: str, **kw) -> "AugmentKind":
        return cls(kind=name.strip().lower(), **kw)


def weak_view(seq: TokenSequence) -> TokenSequence:
    """Identity on the token surface; returned as-is, no copy needed."""
    return seq


def strong_view(seq: TokenSequence, kind: AugmentKind,
                rng: RngStream) -> tuple[TokenSequence, list[int], list[int]]:
    """Produce a perturbed copy of `seq`.

    Returns (view, positions, original_ids): `positions` index into the view
    and mark tokens replaced by [MASK]; `original_ids` hold what stood there.
    Both are empty for every kind except "mask", since only masking creates
    reconstruction targets.
    """
    content = seq.content_positions()
    n = len(content)
    if n == 0 or kind.kind == "dropout":
        return seq.copy(), [], []

    if kind.kind == "mask":
        k = max(1, round_half_up(kind.mask_ratio * n))
        chosen = sorted(int(i) for i in rng.choice(n, size=k))
        view = seq.copy()
        positions, originals = [], []
        for ci in chosen:
            raw = content[ci]
            positions.append(raw)
            originals.append(view.ids[raw])
            view.ids[raw] = MASK_ID
            view.is_special[raw] = True
        return view, positions, originals

    if kind.kind == "crop":
        s = max(1, round_half_up(kind.keep_ratio * n))
        start = rng.integers(0, n - s + 1)
        lo = content[start]
        hi = content[start + s - 1]
        return TokenSequence(seq.ids[lo:hi + 1], seq.is_special[lo:hi + 1]), [], []

    if kind.kind == "swap":
        view = seq.copy()
        if n >= 2:
            for _ in range(kind.swap_repeats):
                a, b = (content[int(i)] for i in rng.choice(n, size=2))
                view.ids[a], view.ids[b] = view.ids[b], view.ids[a]
        return view, [], []

    # deletion: drop each content token with prob mask_ratio; if everything
    # would go, keep one survivor so the model still sees some signal
    drops = rng.uniform(n) < kind.mask_ratio
    if drops.all():
        drops[rng.integers(0, n)] = False
    dropped = {content[i] for i in range(n) if drops[i]}
    ids = [t for i, t in enumerate(seq.ids) if i not in dropped]
    special = [s for i, s in enumerate(seq.is_special) if i not in dropped]
    return TokenSequence(ids, special), [], []
