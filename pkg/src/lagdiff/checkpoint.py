"""Model checkpoints: a TDMW weight file, the vocabulary, and a JSON manifest.

Weight file layout (all integers u32 little-endian)::

    b"TDMW" | version | tensor count |
    per tensor: name length | UTF-8 name | rank | dims... | f64 payload (row-major, LE)
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .diffusion import UNetConfig, UNetWeights
from .tensor import Tensor
from .text import Vocabulary, load_vocab, save_vocab

MAGIC = b"TDMW"
VERSION = 1

WEIGHTS_FILE = "weights.tdmw"
VOCAB_FILE = "vocab.json"
VOCAB_BLOB = "vocab.bin"
MANIFEST_FILE = "manifest.json"


class CheckpointFormatError(ValueError):
    pass


def save_weights(w: UNetWeights, path) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(w.params))]
    for name, t in w.params.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tensors(path) -> "OrderedDict[str, np.ndarray]":
    raw = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointFormatError(f"{path}: truncated checkpoint")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(raw):
        raise CheckpointFormatError(f"{path}: trailing bytes")
    return out


def save_model(w: UNetWeights, vocab: Vocabulary, out_dir, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_weights(w, out / WEIGHTS_FILE)
    save_vocab(vocab, out / VOCAB_FILE, out / VOCAB_BLOB)
    manifest = {
        "format": "lagdiff-model",
        "architecture": w.config.to_dict(),
        "weights": WEIGHTS_FILE,
        "vocabulary": VOCAB_FILE,
        "param_count": w.census(),
        "digest": w.digest(),
    }
    if extra:
        manifest.update(extra)
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def load_model(model_dir) -> tuple[UNetWeights, Vocabulary]:
    d = Path(model_dir)
    manifest = json.loads((d / MANIFEST_FILE).read_text())
    arch = dict(manifest["architecture"])
    arch["widths"] = tuple(arch["widths"])
    cfg = UNetConfig(**arch)
    tensors = read_tensors(d / manifest["weights"])
    w = UNetWeights(cfg, OrderedDict((k, Tensor(v, name=k)) for k, v in tensors.items()))
    vocab = load_vocab(d / manifest["vocabulary"])
    if w.digest() != manifest.get("digest", w.digest()):
        raise CheckpointFormatError(f"{d}: weight digest does not match manifest")
    return w, vocab
