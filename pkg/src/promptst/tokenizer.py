"""Whitespace word-level vocabulary and encoding.

Tokens are lowercased whitespace-separated words. Five special tokens occupy
the first five ids in every vocabulary file; everything downstream (masking,
augmentation, checkpoint hashing) relies on that layout.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

SPECIALS = ("[PAD]", "[MASK]", "[UNK]", "[CLS]", "[SEP]")
PAD_ID = 0
MASK_ID = 1
UNK_ID = 2
CLS_ID = 3
SEP_ID = 4
NUM_SPECIALS = len(SPECIALS)


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class TokenSequence:
    """Encoded token ids plus a parallel flag marking non-content positions.

    `is_special[i]` is True for framing/control tokens ([CLS], [SEP], [MASK],
    [PAD]) and for [UNK]; augmentation and masking only ever touch positions
    where it is False.
    """

    ids: list[int] = field(default_factory=list)
    is_special: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if len(self.ids) != len(self.is_special):
            raise ValueError("ids and is_special must have equal length")

    def __len__(self) -> int:
        return len(self.ids)

    def content_positions(self) -> list[int]:
        return [i for i, s in enumerate(self.is_special) if not s]

    def copy(self) -> "TokenSequence":
        return TokenSequence(list(self.ids), list(self.is_special))


class Vocab:
    """Bidirectional token/id mapping with a stable on-disk form."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if len(tokens) < NUM_SPECIALS or tuple(tokens[:NUM_SPECIALS]) != SPECIALS:
            raise ValueError(
                f"vocabulary must start with the special tokens {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.id_to_token = tokens
        self.token_to_id = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, text: str) -> TokenSequence:
        """Encode raw text: lowercase, split, map unknowns to [UNK].

        No [CLS]/[SEP] framing here; prompt assembly adds those.
        """
        ids = [self.id_of(t) for t in tokenize(text)]
        return TokenSequence(ids, [i < NUM_SPECIALS for i in ids])

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.id_to_token[i] for i in ids)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.canonical_text())

    def canonical_text(self) -> str:
        return "\n".join(self.id_to_token) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f]
        while tokens and tokens[-1] == "":
            tokens.pop()
        return cls(tokens)


def build_vocab(corpus: Iterable[str], min_count: int = 1,
                extra_tokens: Sequence[str] = ()) -> Vocab:
    """Frequency-sorted vocabulary over `corpus`.

    Order after the specials: descending count, ties broken lexicographically.
    `extra_tokens` (label words, template literals) are always included, even
    at zero corpus count, ranked by whatever count they do have.
    """
    counts: dict[str, int] = {}
    for line in corpus:
        for tok in tokenize(line):
            counts[tok] = counts.get(tok, 0) + 1
    keep = {t for t, c in counts.items() if c >= min_count}
    for t in extra_tokens:
        t = t.lower()
        if t.upper() in SPECIALS:
            raise ValueError(f"extra token {t!r} collides with a special token")
        keep.add(t)
    ordered = sorted(keep, key=lambda t: (-counts.get(t, 0), t))
    return Vocab(list(SPECIALS) + ordered)
