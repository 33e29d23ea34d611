"""Finite-difference verification of tape gradients.

Central differences against a re-evaluatable scalar loss. The loss closure is
called several times, so it has to be deterministic; we verify that explicitly
before perturbing anything, because a silently reseeded dropout mask would
make the check meaningless.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .rng import RngStream
from .tensor import Tape, Tensor, backward


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    sample: int = 0,
    rng: RngStream | None = None,
) -> float:
    """Compare tape gradients with central differences; return max relative error.

    `sample` > 0 checks that many randomly chosen scalar entries (drawn with
    `rng`) instead of every entry. Relative error for one entry is
    |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
    """
    with Tape() as tape:
        out = loss_fn()
    base = float(out.data)
    grads_by_tid = backward(tape, out)
    ad = {}
    for name, p in params.items():
        g = grads_by_tid.get(p.tid)
        ad[name] = np.zeros_like(p.data) if g is None else g

    check = float(loss_fn().data)
    if check != base:
        raise RuntimeError(
            "loss_fn is not deterministic: re-evaluation gave "
            f"{check!r} vs {base!r}; fix the rng streams before gradchecking")

    entries = []
    for name, p in params.items():
        for flat in range(p.data.size):
            entries.append((name, flat))
    if sample and sample < len(entries):
        if rng is None:
            rng = RngStream(0, "gradcheck")
        idx = rng.choice(len(entries), size=sample, replace=False)
        entries = [entries[int(i)] for i in idx]

    max_rel = 0.0
    for name, flat in entries:
        flat_view = params[name].data.reshape(-1)
        orig = flat_view[flat]
        flat_view[flat] = orig + eps
        up = float(loss_fn().data)
        flat_view[flat] = orig - eps
        down = float(loss_fn().data)
        flat_view[flat] = orig
        fd = (up - down) / (2.0 * eps)
        g = float(ad[name].reshape(-1)[flat])
        rel = abs(g - fd) / max(abs(g), abs(fd), 1e-8)
        max_rel = max(max_rel, rel)
    return max_rel
