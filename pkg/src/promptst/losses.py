"""Training objective: supervised prompt loss, confidence-gated
self-training on unlabeled text, and a masked-token regularizer.

Each unlabeled sentence is read twice. The weak pass leaves the token
surface alone (the model's own dropout is the only noise) and produces a
pseudo-label distribution that is never differentiated through; it runs on a
throwaway tape, so there is no gradient path to cut. The strong pass runs on
a perturbed surface and receives gradients: its class distribution is pushed
toward the pseudo-label whenever the weak pass was confident enough, and
when the perturbation is token masking, the same forward also pays a
masked-token reconstruction loss at the masked positions.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .augment import AugmentKind, strong_view, weak_view
from .model import Model, forward
from .prompting import PromptedText, TaskBinding
from .rng import RngStream
from .tensor import Tape, Tensor


@dataclass
class HyperParams:
    lr: float = 3e-4
    batch_size: int = 4
    mu: int = 4
    n: int = 16
    lambda1: float = 1.0
    lambda2: float = 0.5
    tau: float = 0.95
    mask_ratio: float = 0.15
    steps: int = 600
    eval_interval: int = 50

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mu < 0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if not 0.0 < self.mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio must be in (0, 1], got {self.mask_ratio}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.eval_interval < 1:
            raise ValueError(f"eval_interval must be >= 1, got {self.eval_interval}")


@dataclass
class LossBreakdown:
    """Per-step scalars, as logged. `total` is the value on the tape."""

    l_s: float
    l_st: float
    l_ssl: float
    total: float
    retained: int
    mu_b: int

    def to_dict(self) -> dict:
        return {"l_s": self.l_s, "l_st": self.l_st, "l_ssl": self.l_ssl,
                "total": self.total, "retained": self.retained, "mu_b": self.mu_b}


@dataclass
class TrainBatch:
    """B labeled examples plus mu*B unlabeled texts (no labels attached)."""

    labeled: list
    unlabeled: list


def supervised_loss(model: Model, labeled, binding: TaskBinding,
                    training: bool, rng: RngStream) -> Tensor:
    """Mean cross-entropy of the prompted class distribution over a batch."""
    if not labeled:
        raise ValueError("supervised loss needs at least one labeled example")
    terms = []
    for i, ex in enumerate(labeled):
        prompted = binding.prompt(ex.text)
        logits = forward(model, prompted.seq.ids, training, rng.child(f"sup/{i}"))
        probs = binding.class_probs(logits, prompted)
        terms.append(T.cross_entropy(ex.label, probs))
    return T.scale(T.add_n(terms), 1.0 / len(terms))


def _masked_positions_in_prompt(prompted: PromptedText, slot: int,
                                raw_positions: list, originals: list):
    """Map masked positions of an augmented raw sentence into the prompt.

    Positions truncated away by the length budget are dropped.
    """
    lookup = prompted.slot_positions[slot]
    out = []
    for raw, orig in zip(raw_positions, originals):
        if raw < len(lookup):
            out.append((lookup[raw], orig))
    return out


def _unlabeled_example_terms(model: Model, text, binding: TaskBinding,
                             kind: AugmentKind, tau: float, i: int,
                             rng: RngStream):
    """One unlabeled sentence -> (gate passed, st term or None, ssl term or None).

    The weak pass runs inside a throwaway tape so none of its ops reach the
    caller's tape: pseudo-labels are constants by construction.
    """
    raw = binding.encode(text)

    with Tape():
        weak_prompt = binding.prompt_sequences([weak_view(s) for s in raw])
        weak_logits = forward(model, weak_prompt.seq.ids, True, rng.child(f"weak/{i}"))
        row = weak_logits.data[weak_prompt.mask_position][binding.label_word_ids]
        z = row - row.max()
        q = np.exp(z) / np.exp(z).sum()
    pseudo = int(np.argmax(q))
    confident = bool(q.max() >= tau)

    views, positions, originals = [], [], []
    for k, s in enumerate(raw):
        view, pos, orig = strong_view(s, kind, rng.child(f"aug/{i}/s{k}"))
        views.append(view)
        positions.append(pos)
        originals.append(orig)
    strong_prompt = binding.prompt_sequences(views)
    strong_logits = forward(model, strong_prompt.seq.ids, True,
                            rng.child(f"strong/{i}"))

    st_term = None
    if confident:
        probs = binding.class_probs(strong_logits, strong_prompt)
        st_term = T.cross_entropy(pseudo, probs)

    ssl_term = None
    pairs = []
    for k in range(len(raw)):
        pairs += _masked_positions_in_prompt(strong_prompt, k,
                                             positions[k], originals[k])
    if pairs:
        ces = []
        for pos, orig in pairs:
            token_probs = T.softmax(T.take_row(strong_logits, pos))
            ces.append(T.cross_entropy(orig, token_probs))
        ssl_term = T.scale(T.add_n(ces), 1.0 / len(ces))

    return confident, st_term, ssl_term


def self_training_loss(model: Model, unlabeled, binding: TaskBinding,
                       kind: AugmentKind, tau: float,
                       rng: RngStream) -> tuple[Tensor | None, int]:
    """Confidence-gated consistency loss, summed over retained examples and
    divided by the full unlabeled count. Returns (loss or None, retained)."""
    if not unlabeled:
        raise ValueError("self-training loss needs unlabeled examples")
    terms = []
    for i, text in enumerate(unlabeled):
        confident, st, _ = _unlabeled_example_terms(
            model, text, binding, kind, tau, i, rng)
        if confident and st is not None:
            terms.append(st)
    if not terms:
        return None, 0
    return T.scale(T.add_n(terms), 1.0 / len(unlabeled)), len(terms)


def mlm_loss(model: Model, items, training: bool, rng: RngStream) -> Tensor | None:
    """Masked-token loss over (sequence, positions, original_ids) triples.

    Per sequence: mean cross-entropy at its masked positions; then the mean
    over sequences that have any. None when nothing is masked.
    """
    per_seq = []
    for i, (seq, positions, originals) in enumerate(items):
        if not positions:
            continue
        logits = forward(model, seq.ids, training, rng.child(f"mlm/{i}"))
        ces = []
        for pos, orig in zip(positions, originals):
            token_probs = T.softmax(T.take_row(logits, pos))
            ces.append(T.cross_entropy(orig, token_probs))
        per_seq.append(T.scale(T.add_n(ces), 1.0 / len(ces)))
    if not per_seq:
        return None
    return T.scale(T.add_n(per_seq), 1.0 / len(per_seq))


def total_loss(model: Model, batch: TrainBatch, hp: HyperParams,
               kind: AugmentKind, binding: TaskBinding, rng: RngStream,
               target_binding: Optional[TaskBinding] = None
               ) -> tuple[Tensor, LossBreakdown]:
    """Combined objective for one step.

    total = l_s + lambda1 * l_st + lambda2 * l_ssl

    l_st sums retained (confident) consistency terms over mu*B; l_ssl is the
    masked-token loss of the same strong forwards, present only when the
    strong view is token masking. Zero-weight or empty terms are never added
    to the tape, so setting lambda1 = lambda2 = 0 reproduces the supervised
    loss bit for bit. When `target_binding` is given, unlabeled text is
    prompted with it (labeled text keeps `binding`), which is the zero-shot
    transfer configuration.

    Randomness is drawn from fixed child streams of `rng`, which makes any
    step reproducible from (seed, path) alone: labeled example i forwards
    under "sup/{i}"; unlabeled example i uses "weak/{i}" for the weak pass,
    "aug/{i}/s{k}" for the strong view of sentence slot k, and "strong/{i}"
    for the strong pass. Tests reconstruct these streams to build oracles.
    """
    if not batch.labeled:
        raise ValueError("batch has no labeled examples")
    if hp.mu > 0 and not batch.unlabeled:
        raise ValueError(f"mu={hp.mu} but the batch has no unlabeled examples")

    l_s = supervised_loss(model, batch.labeled, binding, True, rng)

    st_terms = []
    ssl_terms = []
    retained = 0
    mu_b = len(batch.unlabeled)
    u_binding = target_binding if target_binding is not None else binding
    for i, text in enumerate(batch.unlabeled):
        confident, st, ssl = _unlabeled_example_terms(
            model, text, u_binding, kind, hp.tau, i, rng)
        if confident and st is not None:
            st_terms.append(st)
            retained += 1
        if ssl is not None:
            ssl_terms.append(ssl)

    l_st_t = T.scale(T.add_n(st_terms), 1.0 / mu_b) if st_terms else None
    l_ssl_t = T.scale(T.add_n(ssl_terms), 1.0 / mu_b) if ssl_terms else None

    total = l_s
    if hp.lambda1 != 0.0 and l_st_t is not None:
        total = T.add(total, T.scale(l_st_t, hp.lambda1))
    if hp.lambda2 != 0.0 and l_ssl_t is not None:
        total = T.add(total, T.scale(l_ssl_t, hp.lambda2))

    l_s_f = float(l_s.data)
    l_st_f = float(l_st_t.data) if l_st_t is not None else 0.0
    l_ssl_f = float(l_ssl_t.data) if l_ssl_t is not None else 0.0
    total_f = float(total.data)
    breakdown = LossBreakdown(l_s_f, l_st_f, l_ssl_f, total_f, retained, mu_b)
    assert retained > 0 or l_st_f == 0.0
    check = l_s_f
    if hp.lambda1 != 0.0 and l_st_t is not None:
        check = check + hp.lambda1 * l_st_f
    if hp.lambda2 != 0.0 and l_ssl_t is not None:
        check = check + hp.lambda2 * l_ssl_f
    assert abs(total_f - check) <= 1e-12 * max(1.0, abs(total_f))
    return total, breakdown
