"""Cloze-style prompts: templates, label words, and prompt assembly.

A task is defined by a template with one [MASK] slot and a list of label
words. An input sentence is spliced into the template, the model scores the
[MASK] position, and the class distribution is the softmax over just the
label-word logits. No extra classification parameters exist.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .tokenizer import CLS_ID, MASK_ID, NUM_SPECIALS, SEP_ID, TokenSequence, Vocab

LIT = "lit"
SLOT = "x"
MASK = "mask"


@dataclass(frozen=True)
class PromptTemplate:
    """Parsed template: a sequence of literal words, input slots, one mask."""

    segments: tuple
    arity: int

    @classmethod
    def parse(cls, text: str, arity: int) -> "PromptTemplate":
        if arity not in (1, 2):
            raise ValueError(f"template arity must be 1 or 2, got {arity}")
        segments = []
        for tok in text.split():
            if tok == "[MASK]":
                segments.append((MASK,))
            elif tok == "{x}":
                segments.append((SLOT, 0))
            elif tok in ("{x1}", "{x2}"):
                segments.append((SLOT, int(tok[2]) - 1))
            else:
                segments.append((LIT, tok.lower()))
        masks = sum(1 for s in segments if s[0] == MASK)
        if masks != 1:
            raise ValueError(f"template must contain exactly one [MASK], found {masks}")
        slots = [s[1] for s in segments if s[0] == SLOT]
        want = [0] if arity == 1 else [0, 1]
        if sorted(slots) != want:
            names = "{x}" if arity == 1 else "{x1} and {x2}"
            raise ValueError(
                f"arity-{arity} template must use {names} exactly once, "
                f"got slots {slots} in {text!r}")
        if arity == 1 and any(s == (SLOT, 1) for s in segments):
            raise ValueError("arity-1 template cannot use {x2}")
        return cls(tuple(segments), arity)

    def literals(self) -> list[str]:
        return [s[1] for s in self.segments if s[0] == LIT]

    def overhead(self) -> int:
        """Positions not available to input text: [CLS], [SEP], literals, mask."""
        return 2 + sum(1 for s in self.segments if s[0] != SLOT)


@dataclass(frozen=True)
class PromptTask:
    """Classification task description, normally loaded from a JSON file."""

    labels: tuple
    label_words: tuple
    template: PromptTemplate
    arity: int
    positive_label: str

    @classmethod
    def from_dict(cls, d: dict) -> "PromptTask":
        labels = tuple(d["labels"])
        words = tuple(w.lower() for w in d["label_words"])
        arity = int(d["arity"])
        if len(labels) < 2:
            raise ValueError("a task needs at least two labels")
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate label names")
        if len(words) != len(labels):
            raise ValueError(
                f"{len(labels)} labels but {len(words)} label words")
        if len(set(words)) != len(words):
            raise ValueError("label words must be distinct")
        for w in words:
            if len(w.split()) != 1:
                raise ValueError(f"label word {w!r} must be a single token")
        template = PromptTemplate.parse(d["template"], arity)
        positive = d.get("positive_label", labels[1])
        if positive not in labels:
            raise ValueError(f"positive_label {positive!r} is not a label")
        return cls(labels, words, template, arity, positive)

    @classmethod
    def load(cls, path: str) -> "PromptTask":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def label_index(self, name: str) -> int:
        return self.labels.index(name)

    @property
    def num_labels(self) -> int:
        return len(self.labels)


@dataclass
class PromptedText:
    """A template instantiation.

    `slot_positions[k][j]` is the prompted-sequence index of the j-th raw
    token of slot k that survived truncation; masked-token losses use it to
    carry positions from an augmented raw sentence into the prompt.
    """

    seq: TokenSequence
    mask_position: int
    slot_positions: tuple


def build_prompt(template: PromptTemplate, slots: Sequence[TokenSequence],
                 vocab: Vocab, max_seq_len: int) -> PromptedText:
    """Splice raw token sequences into `template`, framed [CLS] ... [SEP].

    Over-length inputs are truncated from the right. With two slots, tokens
    are removed one at a time from whichever slot currently has more left
    (ties trim the later slot), which keeps the shorter text intact.
    """
    if len(slots) != template.arity:
        raise ValueError(f"template expects {template.arity} inputs, got {len(slots)}")
    budget = max_seq_len - template.overhead()
    if budget < 0:
        raise ValueError(
            f"template overhead {template.overhead()} exceeds max_seq_len {max_seq_len}")
    keep = [len(s) for s in slots]
    while sum(keep) > budget:
        k = max(range(len(keep)), key=lambda i: (keep[i], i))
        keep[k] -= 1

    ids = [CLS_ID]
    special = [True]
    mask_position = -1
    slot_positions: list[list[int]] = [[] for _ in slots]
    for seg in template.segments:
        if seg[0] == LIT:
            word = seg[1]
            if word not in vocab:
                raise ValueError(f"template literal {word!r} is not in the vocabulary")
            ids.append(vocab.token_to_id[word])
            special.append(False)
        elif seg[0] == MASK:
            mask_position = len(ids)
            ids.append(MASK_ID)
            special.append(True)
        else:
            k = seg[1]
            s = slots[k]
            for j in range(keep[k]):
                slot_positions[k].append(len(ids))
                ids.append(s.ids[j])
                special.append(s.is_special[j])
    ids.append(SEP_ID)
    special.append(True)
    return PromptedText(TokenSequence(ids, special), mask_position,
                        tuple(slot_positions))


class TaskBinding:
    """A task resolved against a concrete vocabulary and length limit."""

    def __init__(self, task: PromptTask, vocab: Vocab, max_seq_len: int):
        for w in task.label_words:
            if w not in vocab:
                raise ValueError(f"label word {w!r} is not in the vocabulary")
        for lit in task.template.literals():
            if lit not in vocab:
                raise ValueError(f"template literal {lit!r} is not in the vocabulary")
        self.task = task
        self.vocab = vocab
        self.max_seq_len = max_seq_len
        self.label_word_ids = np.array(
            [vocab.token_to_id[w] for w in task.label_words], dtype=np.int64)

    def encode(self, text) -> tuple:
        """Encode one input (a string, or a pair of strings for arity 2)."""
        if self.task.arity == 1:
            if not isinstance(text, str):
                raise ValueError("arity-1 task expects a single string")
            return (self.vocab.encode(text),)
        if isinstance(text, str) or len(text) != 2:
            raise ValueError("arity-2 task expects a pair of strings")
        return (self.vocab.encode(text[0]), self.vocab.encode(text[1]))

    def prompt(self, text) -> PromptedText:
        return self.prompt_sequences(self.encode(text))

    def prompt_sequences(self, seqs: Sequence[TokenSequence]) -> PromptedText:
        return build_prompt(self.task.template, seqs, self.vocab, self.max_seq_len)

    def class_probs(self, logits: Tensor, prompted: PromptedText) -> Tensor:
        """Differentiable class distribution from [L, V] logits."""
        row = T.take_row(logits, prompted.mask_position)
        return T.softmax(T.gather(row, self.label_word_ids))

    def predict(self, logits_data: np.ndarray, prompted: PromptedText) -> int:
        """Eval-path argmax label (ties resolve to the lowest label index)."""
        row = np.asarray(logits_data)[prompted.mask_position]
        return int(np.argmax(row[self.label_word_ids]))

    @property
    def positive_index(self) -> int:
        return self.task.label_index(self.task.positive_label)
