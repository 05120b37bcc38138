"""Seeded counter-based random streams.

All randomness flows through explicit generators built here; nothing touches
numpy's global state. Streams are keyed by (seed, *labels) so independent
consumers never share draws.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    digest = hashlib.sha256(str(label).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def make_rng(seed: int, *labels) -> np.random.Generator:
    """Philox generator for the stream identified by ``seed`` and ``labels``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_label_key(lb) for lb in labels]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
