"""Deterministic named random streams derived from a single root seed."""
from __future__ import annotations

import hashlib

import numpy as np


def stream_key(*parts):
    """Stable 64-bit key from a sequence of strings/ints."""
    h = hashlib.blake2s("\x1f".join(str(p) for p in parts).encode())
    return int.from_bytes(h.digest()[:8], "little")


def derive_rng(seed, *stream) -> np.random.Generator:
    """Generator for a named stream; independent of other streams' usage."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1),
                                                         stream_key(*stream)]))
