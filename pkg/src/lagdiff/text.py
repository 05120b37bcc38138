"""Closed-vocabulary tokenizer and token-embedding table.

Stands in for a pretrained text encoder: a prompt is split on whitespace, each
word maps to a row of a learned embedding table, and a fixed sinusoidal
position vector is added. A block of 32 reserved "rare" ids at the end of the
table backs concept identifier tokens (``V*``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import make_rng
from .tensor import Tensor, take_rows

RESERVED = 32
SEQ_LEN = 16
CONCEPT_WORD = "V*"
NULL_WORD = "<null>"
TEMPLATE = "a photo of a"

CLASSES = ("dog", "cat", "car", "bird", "house", "tree", "cup", "chair")
BACKGROUNDS = ("beach", "lawn", "street", "night")
DEFAULT_WORDS = (NULL_WORD, "a", "photo", "of", "on", "at", "the", "in") + CLASSES + BACKGROUNDS


class VocabularyError(KeyError):
    """Unknown word or malformed vocabulary input."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class CapacityError(RuntimeError):
    """The reserved rare-token block is exhausted."""


@dataclass
class Vocabulary:
    words: list[str]
    embeddings: Tensor
    classes: tuple[str, ...] = ()
    registered: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.words)}

    @property
    def size(self) -> int:
        return len(self.words)

    @property
    def d_txt(self) -> int:
        return self.embeddings.shape[1]

    @property
    def reserved_start(self) -> int:
        return len(self.words) - RESERVED

    @property
    def reserved_ids(self) -> range:
        return range(self.reserved_start, len(self.words))

    @property
    def pad_id(self) -> int:
        # Pad positions are masked out of attention, so row 0 is never read through them.
        return 0

    def id_of(self, word: str) -> int:
        try:
            return self.index[word]
        except KeyError:
            raise VocabularyError(f"unknown word: {word!r}") from None

    def class_ids(self) -> list[tuple[int, str]]:
        return sorted((self.index[c], c) for c in self.classes)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    length: int
    concept_indices: tuple[int, ...] = ()

    @property
    def valid(self) -> np.ndarray:
        return np.arange(len(self.ids)) < self.length


def build_vocab(words, d_txt: int = 32, seed: int = 0, classes=None) -> Vocabulary:
    """Vocabulary over ``words`` plus a reserved block of rare ids."""
    words = list(words)
    if not words:
        raise VocabularyError("word list is empty")
    if len(set(words)) != len(words):
        dupes = sorted({w for w in words if words.count(w) > 1})
        raise VocabularyError(f"duplicate words: {dupes}")
    if CONCEPT_WORD in words:
        raise VocabularyError(f"{CONCEPT_WORD!r} is reserved for concept tokens")
    full = words + [f"<rare{k}>" for k in range(RESERVED)]
    table = make_rng(seed, "vocab").normal(0.0, 0.02, size=(len(full), d_txt))
    if classes is None:
        classes = tuple(c for c in CLASSES if c in words)
    return Vocabulary(full, Tensor(table, name="token_embedding"), tuple(classes))


def default_vocab(d_txt: int = 32, seed: int = 0) -> Vocabulary:
    return build_vocab(DEFAULT_WORDS, d_txt, seed)


def register_concept_token(vocab: Vocabulary) -> int:
    """Claim the next unused rare id as a concept identifier."""
    for tid in vocab.reserved_ids:
        if tid not in vocab.registered:
            vocab.registered.append(tid)
            return tid
    raise CapacityError(f"all {RESERVED} reserved token ids are registered")


def render_template(macro_class: str | None, vocab: Vocabulary | None = None) -> str:
    """Training prompt for a concept; ``None`` drops the macro-class word."""
    if macro_class is None:
        return f"{TEMPLATE} {CONCEPT_WORD}"
    words = macro_class.split()
    if not words:
        raise VocabularyError("macro class is empty")
    if vocab is not None:
        for w in words:
            vocab.id_of(w)
    return f"{TEMPLATE} {CONCEPT_WORD} {macro_class}"


def tokenize(prompt: str, vocab: Vocabulary, macro_class: str | None = None,
             concept_id: int | None = None, seq_len: int = SEQ_LEN) -> TokenSequence:
    """Map ``prompt`` to padded ids and locate the concept tokens.

    ``V*`` resolves to ``concept_id`` (default: the latest registered token).
    The concept indices are the ``V*`` position plus the macro-class word(s)
    that follow it; without an explicit ``macro_class`` the single next word is
    taken. An empty prompt encodes as the null token.
    """
    words = prompt.split() or [NULL_WORD]
    unknown = [w for w in words if w != CONCEPT_WORD and w not in vocab.index]
    if unknown:
        raise VocabularyError(f"unknown words in prompt: {unknown}")
    ids: list[int] = []
    concept: list[int] = []
    for pos, w in enumerate(words):
        if w == CONCEPT_WORD:
            if concept_id is None:
                if not vocab.registered:
                    raise VocabularyError("prompt uses V* but no concept token is registered")
                concept_id = vocab.registered[-1]
            ids.append(concept_id)
            concept.append(pos)
            follow = macro_class.split() if macro_class else words[pos + 1:pos + 2]
            if words[pos + 1:pos + 1 + len(follow)] == follow:
                concept.extend(range(pos + 1, pos + 1 + len(follow)))
        else:
            ids.append(vocab.index[w])
    ids = ids[:seq_len]
    length = len(ids)
    concept = [c for c in concept if c < length]
    ids += [vocab.pad_id] * (seq_len - length)
    return TokenSequence(tuple(ids), length, tuple(sorted(set(concept))))


def positional_table(seq_len: int, d: int) -> np.ndarray:
    pos = np.arange(seq_len)[:, None]
    freq = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    table = np.zeros((seq_len, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: d // 2])
    # Scaled to the same order as the token rows so position does not drown identity.
    return 0.02 * table


def embed(tokens: TokenSequence, vocab: Vocabulary, table: Tensor | None = None) -> Tensor:
    """Conditioning matrix (seq, d_txt): token rows plus position vectors.

    ``table`` overrides the vocabulary's table, e.g. with a trainable copy.
    """
    table = vocab.embeddings if table is None else table
    rows = take_rows(table, np.asarray(tokens.ids))
    return rows + positional_table(len(tokens.ids), table.shape[1])


def encode(prompt: str, vocab: Vocabulary, **kw) -> tuple[Tensor, TokenSequence]:
    toks = tokenize(prompt, vocab, **kw)
    return embed(toks, vocab), toks


# -- persistence ------------------------------------------------------------------

def save_vocab(vocab: Vocabulary, json_path, blob_path) -> None:
    json_path, blob_path = Path(json_path), Path(blob_path)
    meta = {
        "words": vocab.words,
        "classes": list(vocab.classes),
        "d_txt": vocab.d_txt,
        "reserved": RESERVED,
        "registered": vocab.registered,
        "embeddings": blob_path.name,
    }
    json_path.write_text(json.dumps(meta, indent=1))
    blob_path.write_bytes(np.ascontiguousarray(vocab.embeddings.data, dtype="<f8").tobytes())


def load_vocab(json_path) -> Vocabulary:
    json_path = Path(json_path)
    meta = json.loads(json_path.read_text())
    raw = (json_path.parent / meta["embeddings"]).read_bytes()
    n, d = len(meta["words"]), meta["d_txt"]
    if len(raw) != n * d * 8:
        raise ValueError(f"embedding blob has {len(raw)} bytes, expected {n * d * 8}")
    table = np.frombuffer(raw, dtype="<f8").reshape(n, d).astype(np.float64)
    return Vocabulary(list(meta["words"]), Tensor(table, name="token_embedding"),
                      tuple(meta["classes"]), list(meta.get("registered", [])))
