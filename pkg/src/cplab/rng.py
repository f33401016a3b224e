"""Deterministic random-stream derivation.

Every stochastic consumer derives its generator from
``(master seed, purpose label, *indices)``.  Streams are independent and
order-free: adding replicas or reordering pipeline stages never perturbs
the stream any existing consumer sees.
"""
from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _label_entropy(label: str) -> int:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream_seed(master: int, label: str, *indices: int) -> np.random.SeedSequence:
    """Seed sequence for the stream ``(master, label, indices)``."""
    entropy = (int(master) & _MASK64, _label_entropy(label)) + tuple(
        int(i) & _MASK64 for i in indices
    )
    return np.random.SeedSequence(entropy)


def make_rng(master: int, label: str, *indices: int) -> np.random.Generator:
    """Counter-based generator for the given stream coordinates."""
    return np.random.Generator(np.random.Philox(stream_seed(master, label, *indices)))


class UniformBuffer:
    """Buffered scalar uniforms for tight event loops.

    Drawing one variate at a time from a numpy generator costs far more
    than the surrounding arithmetic; this refills in blocks and hands out
    plain Python floats.
    """

    __slots__ = ("_rng", "_block", "_buf", "_pos")

    def __init__(self, rng: np.random.Generator, block: int = 1 << 16):
        self._rng = rng
        self._block = block
        self._buf = rng.random(block).tolist()
        self._pos = 0

    def next(self) -> float:
        pos = self._pos
        if pos >= self._block:
            self._buf = self._rng.random(self._block).tolist()
            pos = 0
        self._pos = pos + 1
        return self._buf[pos]
