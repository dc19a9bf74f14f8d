"""Stable, stateless seeds.

Decisions are replayed from the log without any stored generator state, so
every random draw is a pure function of a 64-bit seed. Top-level seeds come
from a keyed BLAKE2 hash of the identifying integers; per-entry seeds and the
uniform draw behind each action use the SplitMix64 finalizer, which is cheap
enough to vectorize over a whole schedule.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def derive_seed(*parts: int) -> int:
    """64-bit seed from a tuple of non-negative integers (e.g. trial seed, participant, t)."""
    data = b"".join(struct.pack("<Q", int(p) & MASK64) for p in parts)
    digest = hashlib.blake2b(data, digest_size=8, person=b"trialfid").digest()
    return int.from_bytes(digest, "little")


def mix64(x):
    """SplitMix64 finalizer on uint64 values (scalar or array), wrapping on overflow."""
    z = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        z = z ^ (z >> np.uint64(31))
    return z


def entry_seeds(schedule_seed: int, n: int) -> np.ndarray:
    offsets = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        keys = np.uint64(schedule_seed & MASK64) + offsets * _GOLDEN
    return mix64(keys)


def uniform_from_seed(seed) -> np.ndarray | float:
    """Uniform draw in [0, 1) determined entirely by ``seed``."""
    bits = mix64(seed) >> np.uint64(11)
    u = bits.astype(np.float64) * (1.0 / (1 << 53))
    return float(u) if np.ndim(u) == 0 else u
