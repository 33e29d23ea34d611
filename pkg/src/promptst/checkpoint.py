"""Single-file model checkpoints.

Layout: one JSON header line (format tag, model config, vocabulary hash,
step, optional rng state, array manifest), then the raw little-endian
float64 parameter data in manifest order. The vocabulary itself lives in a
sidecar `<checkpoint>.vocab` file; its sha256 in the header stops a model
from being silently loaded against the wrong token mapping.
"""
from __future__ import annotations

import json
import os
import tempfile
from typing import Optional

import numpy as np

from .model import Model, ModelConfig, param_names, _param_shape
from .rng import RngStream
from .tensor import Tensor
from .tokenizer import Vocab

FORMAT_TAG = "ckpt-v1"


def vocab_sidecar_path(path: str) -> str:
    return path + ".vocab"


def save_checkpoint(path: str, model: Model, vocab: Vocab, step: int = 0,
                    rng_state: Optional[dict] = None) -> None:
    """Atomic write: assemble in a temp file, then rename into place."""
    manifest = []
    offset = 0
    for name, p in model.params.items():
        length = p.data.size * 8
        manifest.append({"name": name, "shape": list(p.data.shape),
                         "offset": offset, "length": length})
        offset += length
    header = {
        "format": FORMAT_TAG,
        "config": model.config.to_dict(),
        "vocab_sha256": vocab.content_hash(),
        "step": int(step),
        "rng": rng_state,
        "arrays": manifest,
    }
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
            f.write(b"\n")
            for p in model.params.values():
                f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    vocab.save(vocab_sidecar_path(path))


def load_checkpoint(path: str, vocab: Optional[Vocab] = None
                    ) -> tuple[Model, Vocab, int, Optional[dict]]:
    """Read a checkpoint; returns (model, vocab, step, rng_state).

    The blob length is validated against the manifest before any parameter
    is constructed, so a truncated file can never yield a partial model.
    """
    with open(path, "rb") as f:
        header_line = f.readline()
        blob = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"{path}: not a checkpoint (bad header: {e})") from None
    if header.get("format") != FORMAT_TAG:
        raise ValueError(
            f"{path}: unsupported checkpoint format {header.get('format')!r}")

    if vocab is None:
        sidecar = vocab_sidecar_path(path)
        if not os.path.exists(sidecar):
            raise FileNotFoundError(
                f"{path}: vocabulary sidecar {sidecar} is missing; "
                "pass the vocabulary explicitly")
        vocab = Vocab.load(sidecar)
    if vocab.content_hash() != header["vocab_sha256"]:
        raise ValueError(
            f"{path}: vocabulary hash mismatch; this checkpoint was saved "
            "with a different vocabulary")

    manifest = header["arrays"]
    expected = sum(a["length"] for a in manifest)
    if len(blob) != expected:
        raise ValueError(
            f"{path}: parameter blob has {len(blob)} bytes, manifest "
            f"expects {expected}; the file is truncated or corrupt")

    cfg = ModelConfig.from_dict(header["config"])
    expected_names = param_names(cfg)
    if [a["name"] for a in manifest] != expected_names:
        raise ValueError(f"{path}: manifest does not match the model config")

    params: dict[str, Tensor] = {}
    for a in manifest:
        shape = tuple(a["shape"])
        if shape != _param_shape(a["name"], cfg):
            raise ValueError(
                f"{path}: array {a['name']!r} has shape {shape}, "
                f"config implies {_param_shape(a['name'], cfg)}")
        arr = np.frombuffer(
            blob, dtype="<f8", count=a["length"] // 8,
            offset=a["offset"]).reshape(shape)
        params[a["name"]] = Tensor(arr.copy(), requires_grad=True)
    model = Model(cfg, params)
    return model, vocab, int(header["step"]), header.get("rng")
