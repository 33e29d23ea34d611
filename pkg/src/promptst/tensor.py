"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable primitive records one node on the active tape; `backward`
replays the tape once in reverse and accumulates gradients across fan-out.
Everything is double precision so gradient checks can use tight tolerances.
Tapes are run-local: ops executed outside any `with Tape():` block are pure
evaluations and build no graph (this is how pseudo-label passes are detached).
"""
from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np

from .rng import RngStream

_ids = itertools.count()
_FREED = object()  # sentinel placed in TapeNode.saved by Tape.free_saved()

PROB_FLOOR = 1e-12

# Count of cross_entropy calls that hit the probability floor. Training code
# reads and resets this to surface near-zero target probabilities without
# propagating Inf.
_clamp_events = 0


def clamp_events() -> int:
    return _clamp_events


def reset_clamp_events() -> None:
    global _clamp_events
    _clamp_events = 0


class Tensor:
    """n-d array of float64 in row-major order, plus autodiff metadata."""

    __slots__ = ("data", "requires_grad", "grad", "tid")

    def __init__(self, data, requires_grad: bool = False):
        # note: not ascontiguousarray, which would promote 0-d arrays to 1-d
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tid = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class TapeNode:
    __slots__ = ("op", "inputs", "output", "saved", "backward_fn")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 saved, backward_fn: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.saved = saved
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of the primitive ops behind one scalar loss.

    Nodes are appended in execution order, so every node's inputs precede it
    and one reverse sweep visits each node exactly once.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _tape_stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def free_saved(self) -> None:
        """Release saved activations. The tape can no longer be replayed."""
        for node in self.nodes:
            node.saved = _FREED


_tape_stack: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            saved, backward_fn: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(TapeNode(op, inputs, out, saved, backward_fn))
    return out


def backward(tape: Tape, output: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep over `tape`; returns tensor id -> gradient for leaf tensors.

    `output` must be a scalar produced by ops recorded on the tape. Leaf
    gradients are also written to each leaf's `.grad`.
    """
    if output.data.size != 1:
        raise ValueError("backward requires scalar")
    grads: dict[int, np.ndarray] = {output.tid: np.ones_like(output.data)}
    produced = {node.output.tid for node in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.get(node.output.tid)
        if g is None:
            continue
        if node.saved is _FREED:
            raise RuntimeError(f"saved activations for op '{node.op}' were freed")
        in_grads = node.backward_fn(node.saved, g)
        for t, ig in zip(node.inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            acc = grads.get(t.tid)
            grads[t.tid] = ig if acc is None else acc + ig
            if t.tid not in produced:
                leaves[t.tid] = t
    result = {tid: grads[tid] for tid in leaves}
    for tid, t in leaves.items():
        t.grad = result[tid]
    return result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    return _record(
        "add", (a, b), a.data + b.data, (a.data.shape, b.data.shape),
        lambda s, g: (_unbroadcast(g, s[0]), _unbroadcast(g, s[1])))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _record(
        "sub", (a, b), a.data - b.data, (a.data.shape, b.data.shape),
        lambda s, g: (_unbroadcast(g, s[0]), _unbroadcast(-g, s[1])))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _record(
        "mul", (a, b), a.data * b.data, (a.data, b.data),
        lambda s, g: (_unbroadcast(g * s[1], s[0].shape),
                      _unbroadcast(g * s[0], s[1].shape)))


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, None, lambda s, g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", (a,), a.data * c, c, lambda s, g: (s * g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-d, or 3-d with equal leading (batch) dimension."""
    return _record(
        "matmul", (a, b), a.data @ b.data, (a.data, b.data),
        lambda s, g: (g @ np.swapaxes(s[1], -1, -2),
                      np.swapaxes(s[0], -1, -2) @ g))


def permute(a: Tensor, axes: tuple) -> Tensor:
    return _record(
        "permute", (a,), np.transpose(a.data, axes), tuple(axes),
        lambda s, g: (np.transpose(g, np.argsort(s)),))


def transpose(a: Tensor) -> Tensor:
    return permute(a, (1, 0))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return _record(
        "reshape", (a,), a.data.reshape(shape), a.data.shape,
        lambda s, g: (g.reshape(s),))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather from `table`; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)

    def bw(s, g):
        idx, shape = s
        gt = np.zeros(shape)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record("embedding", (table,), table.data[ids],
                   (ids, table.data.shape), bw)


def gather(v: Tensor, idx: np.ndarray) -> Tensor:
    """Pick entries of a vector; used for label-word logits."""
    if v.data.ndim != 1:
        raise ValueError("gather expects a vector")
    idx = np.asarray(idx, dtype=np.int64)

    def bw(s, g):
        i, n = s
        gv = np.zeros(n)
        np.add.at(gv, i, g)
        return (gv,)

    return _record("gather", (v,), v.data[idx], (idx, v.data.shape[0]), bw)


def pick(v: Tensor, i: int) -> Tensor:
    """Single entry of a vector as a scalar tensor."""
    if v.data.ndim != 1:
        raise ValueError("pick expects a vector")

    def bw(s, g):
        i, n = s
        gv = np.zeros(n)
        gv[i] = g
        return (gv,)

    return _record("pick", (v,), v.data[i], (int(i), v.data.shape[0]), bw)


def take_row(m: Tensor, i: int) -> Tensor:
    if m.data.ndim != 2:
        raise ValueError("take_row expects a matrix")

    def bw(s, g):
        i, shape = s
        gm = np.zeros(shape)
        gm[i] = g
        return (gm,)

    return _record("take_row", (m,), m.data[i], (int(i), m.data.shape), bw)


def clamp_min(a: Tensor, cmin: float) -> Tensor:
    return _record(
        "clamp_min", (a,), np.maximum(a.data, cmin), a.data > cmin,
        lambda s, g: (g * s,))


def log(a: Tensor) -> Tensor:
    return _record("log", (a,), np.log(a.data), a.data, lambda s, g: (g / s,))


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """tanh-form GELU; the backward is the exact derivative of this form."""
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_A * x ** 3))

    def bw(s, g):
        x, t = s
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du),)

    return _record("gelu", (a,), 0.5 * x * (1.0 + t), (x, t), bw)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, with max subtraction for stability."""
    if a.data.size == 0:
        raise ValueError("softmax of empty input")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(s, g):
        y = s
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (a,), y, y, bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then scale + shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def bw(s, g):
        xhat, inv, gain_d = s
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead) if lead else g * xhat
        dbias = g.sum(axis=lead) if lead else g
        gg = g * gain_d
        dx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        return (dx, dgain, dbias)

    return _record("layer_norm", (x, gain, bias), xhat * gain.data + bias.data,
                   (xhat, inv, gain.data), bw)


def dropout(x: Tensor, rate: float, rng: Optional[RngStream], training: bool) -> Tensor:
    """Zero entries with probability `rate`, scale survivors by 1/(1-rate).

    Identity when not training or rate == 0. The mask comes entirely from
    `rng`, so a fixed stream reproduces the same mask.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng stream")
    keep = rng.uniform(x.data.shape) >= rate
    s = 1.0 / (1.0 - rate)
    return _record("dropout", (x,), x.data * keep * s, (keep, s),
                   lambda sv, g: (g * sv[0] * sv[1],))


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of same-shaped tensors as a single tape node."""
    ts = list(tensors)
    if not ts:
        raise ValueError("add_n of empty list")
    if len(ts) == 1:
        return ts[0]
    out = ts[0].data.copy()
    for t in ts[1:]:
        out += t.data
    return _record("add_n", ts, out, len(ts), lambda s, g: (g,) * s)


def mean_of(tensors: Sequence[Tensor]) -> Tensor:
    ts = list(tensors)
    return scale(add_n(ts), 1.0 / len(ts))


def sum_all(a: Tensor) -> Tensor:
    return _record("sum_all", (a,), np.asarray(a.data.sum()), a.data.shape,
                   lambda s, g: (np.broadcast_to(g, s).copy(),))


def cross_entropy(target: int, probs: Tensor) -> Tensor:
    """-log probs[target], in nats.

    Probabilities below PROB_FLOOR are clamped instead of producing Inf; each
    clamp increments the module diagnostic counter (see `clamp_events`).
    """
    if probs.data.ndim != 1 or probs.data.size == 0:
        raise ValueError("cross_entropy expects a non-empty probability vector")
    target = int(target)
    if not 0 <= target < probs.data.size:
        raise ValueError(f"target index {target} out of range")
    if probs.data[target] < PROB_FLOOR:
        global _clamp_events
        _clamp_events += 1
    return neg(log(clamp_min(pick(probs, target), PROB_FLOOR)))


def constant(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64))


def parameter(value, requires_grad: bool = True) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=requires_grad)
