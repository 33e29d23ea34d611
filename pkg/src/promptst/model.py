"""Pre-LayerNorm transformer encoder with a tied masked-token head.

One sequence per forward call; batching happens at the loss level, where each
example carries its own dropout streams. There is no separate classifier
head anywhere: classification reads logits at a [MASK] position and compares
the scores of a few label words, so the same head serves pretraining,
classification, and the masked-token regularizer.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .rng import RngStream
from .tensor import Tensor

INIT_STD = 0.02


@dataclass
class ModelConfig:
    num_layers: int
    d_model: int
    num_heads: int
    d_ff: int
    max_seq_len: int
    vocab_size: int
    dropout_rate: float = 0.1
    tie_mlm_head: bool = True

    def validate(self) -> None:
        problems = []
        if self.num_layers < 1:
            problems.append(f"num_layers must be >= 1, got {self.num_layers}")
        if self.d_model < 1:
            problems.append(f"d_model must be >= 1, got {self.d_model}")
        if self.num_heads < 1 or self.d_model % self.num_heads != 0:
            problems.append(
                f"num_heads must divide d_model ({self.d_model} % {self.num_heads})")
        if self.d_ff < 1:
            problems.append(f"d_ff must be >= 1, got {self.d_ff}")
        if self.max_seq_len < 2:
            problems.append(f"max_seq_len must be >= 2, got {self.max_seq_len}")
        if self.vocab_size < 6:
            problems.append(
                f"vocab_size must exceed the 5 special tokens, got {self.vocab_size}")
        if not 0.0 <= self.dropout_rate < 1.0:
            problems.append(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if problems:
            raise ValueError("invalid model config: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


def expected_param_count(cfg: ModelConfig) -> int:
    d, ff = cfg.d_model, cfg.d_ff
    per_layer = 4 * d * d + 2 * d * ff + 9 * d + ff
    total = (cfg.vocab_size * d + cfg.max_seq_len * d
             + cfg.num_layers * per_layer + 2 * d + cfg.vocab_size)
    if not cfg.tie_mlm_head:
        total += d * cfg.vocab_size
    return total


class Model:
    """Parameter container. `params` preserves canonical insertion order."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def clone(self) -> "Model":
        cloned = {
            name: Tensor(p.data.copy(), requires_grad=p.requires_grad)
            for name, p in self.params.items()
        }
        return Model(self.config, cloned)


def param_names(cfg: ModelConfig) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for i in range(cfg.num_layers):
        names += [f"layer{i}.ln1.gain", f"layer{i}.ln1.bias"]
        names += [f"layer{i}.attn.{w}" for w in
                  ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]
        names += [f"layer{i}.ln2.gain", f"layer{i}.ln2.bias"]
        names += [f"layer{i}.ff.w1", f"layer{i}.ff.b1",
                  f"layer{i}.ff.w2", f"layer{i}.ff.b2"]
    names += ["final_ln.gain", "final_ln.bias", "mlm_bias"]
    if not cfg.tie_mlm_head:
        names.append("mlm_w")
    return names


def _param_shape(name: str, cfg: ModelConfig) -> tuple:
    d, ff = cfg.d_model, cfg.d_ff
    if name == "tok_emb":
        return (cfg.vocab_size, d)
    if name == "pos_emb":
        return (cfg.max_seq_len, d)
    if name == "mlm_bias":
        return (cfg.vocab_size,)
    if name == "mlm_w":
        return (d, cfg.vocab_size)
    if name in ("final_ln.gain", "final_ln.bias"):
        return (d,)
    leaf = name.split(".", 1)[1]
    return {
        "ln1.gain": (d,), "ln1.bias": (d,),
        "ln2.gain": (d,), "ln2.bias": (d,),
        "attn.wq": (d, d), "attn.bq": (d,),
        "attn.wk": (d, d), "attn.bk": (d,),
        "attn.wv": (d, d), "attn.bv": (d,),
        "attn.wo": (d, d), "attn.bo": (d,),
        "ff.w1": (d, ff), "ff.b1": (ff,),
        "ff.w2": (ff, d), "ff.b2": (d,),
    }[leaf]


def init_model(cfg: ModelConfig, rng: RngStream) -> Model:
    """Fresh parameters: N(0, 0.02) weights, zero biases, unit LN gains.

    Each parameter draws from its own named sub-stream, so the values a
    given parameter receives do not depend on initialization order.
    """
    cfg.validate()
    params: dict[str, Tensor] = {}
    for name in param_names(cfg):
        shape = _param_shape(name, cfg)
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            data = np.ones(shape)
        elif leaf.startswith("b") or name == "mlm_bias":
            data = np.zeros(shape)
        else:
            data = rng.child(f"init/{name}").normal(shape, scale=INIT_STD)
        params[name] = Tensor(data, requires_grad=True)
    model = Model(cfg, params)
    assert model.param_count() == expected_param_count(cfg)
    return model


def forward(model: Model, ids, training: bool, rng: RngStream | None = None) -> Tensor:
    """Token logits [L, vocab_size] for one id sequence.

    Training mode applies dropout after the embedding sum, on attention
    probabilities, and after each sublayer output; every site draws from its
    own child of `rng`, so two forwards with the same stream produce
    identical masks.
    """
    cfg = model.config
    p = model.params
    ids = np.asarray(ids, dtype=np.int64)
    L = ids.shape[0]
    if L == 0:
        raise ValueError("cannot run the encoder on an empty sequence")
    if L > cfg.max_seq_len:
        raise ValueError(f"sequence length {L} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id out of vocabulary range")
    if training and cfg.dropout_rate > 0.0 and rng is None:
        raise ValueError("training-mode forward needs an rng stream")

    rate = cfg.dropout_rate
    H = cfg.num_heads
    dh = cfg.d_model // H

    def drop(x, name):
        if not training or rate == 0.0:
            return x
        return T.dropout(x, rate, rng.child(name), training=True)

    x = T.add(T.embedding(p["tok_emb"], ids),
              T.embedding(p["pos_emb"], np.arange(L)))
    x = drop(x, "drop/emb")

    for i in range(cfg.num_layers):
        pre = f"layer{i}"
        h = T.layer_norm(x, p[f"{pre}.ln1.gain"], p[f"{pre}.ln1.bias"])
        q = T.add(T.matmul(h, p[f"{pre}.attn.wq"]), p[f"{pre}.attn.bq"])
        k = T.add(T.matmul(h, p[f"{pre}.attn.wk"]), p[f"{pre}.attn.bk"])
        v = T.add(T.matmul(h, p[f"{pre}.attn.wv"]), p[f"{pre}.attn.bv"])
        # [L, d] -> [H, L, dh] so all heads run as one batched matmul
        q3 = T.permute(T.reshape(q, (L, H, dh)), (1, 0, 2))
        k3 = T.permute(T.reshape(k, (L, H, dh)), (1, 0, 2))
        v3 = T.permute(T.reshape(v, (L, H, dh)), (1, 0, 2))
        scores = T.scale(T.matmul(q3, T.permute(k3, (0, 2, 1))), 1.0 / np.sqrt(dh))
        attn = T.softmax(scores)
        attn = drop(attn, f"drop/layer{i}/attn")
        ctx = T.reshape(T.permute(T.matmul(attn, v3), (1, 0, 2)), (L, cfg.d_model))
        out = T.add(T.matmul(ctx, p[f"{pre}.attn.wo"]), p[f"{pre}.attn.bo"])
        x = T.add(x, drop(out, f"drop/layer{i}/attn_out"))

        h2 = T.layer_norm(x, p[f"{pre}.ln2.gain"], p[f"{pre}.ln2.bias"])
        ff = T.gelu(T.add(T.matmul(h2, p[f"{pre}.ff.w1"]), p[f"{pre}.ff.b1"]))
        ff = T.add(T.matmul(ff, p[f"{pre}.ff.w2"]), p[f"{pre}.ff.b2"])
        x = T.add(x, drop(ff, f"drop/layer{i}/ff_out"))

    x = T.layer_norm(x, p["final_ln.gain"], p["final_ln.bias"])
    if cfg.tie_mlm_head:
        head = T.permute(p["tok_emb"], (1, 0))
    else:
        head = p["mlm_w"]
    return T.add(T.matmul(x, head), p["mlm_bias"])
