"""Deterministic seed derivation and per-purpose random streams.

Every stochastic operation in the harness draws from its own stream, keyed by
the global seed plus string labels (record id, op name, ...).  Adding a new
op therefore never perturbs the draws of existing ops, and any plan or
augmentation can be reproduced from its labels alone.

The keyed hash is fixed as: blake2b with an 8-byte digest over the parts
joined by 0x1f separators, ints encoded as 8 little-endian bytes (two's
complement) and strings as UTF-8; the digest is read little-endian.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF

# part separator; keeps ("ab","c") and ("a","bc") distinct
_SEP = b"\x1f"


def hash64(*parts: bytes | str | int) -> int:
    """Stable 64-bit keyed hash over a sequence of parts."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, int):
            data = (part & _MASK64).to_bytes(8, "little")
        elif isinstance(part, str):
            data = part.encode("utf-8")
        else:
            data = part
        h.update(data)
        h.update(_SEP)
    return int.from_bytes(h.digest(), "little")


def derive_seed(global_seed: int, *labels: str | int) -> int:
    """Stable 64-bit sub-seed for (global seed, labels...)."""
    return hash64(global_seed, *labels)


def stream(global_seed: int, *labels: str | int) -> np.random.Generator:
    """Independent counter-based generator keyed by (global seed, labels...)."""
    return np.random.Generator(np.random.Philox(key=derive_seed(global_seed, *labels)))


def uniform_index(n: int, global_seed: int, *labels: str | int) -> int:
    """Deterministic index in [0, n) from the keyed hash (for one-shot
    choices where a full generator would be wasteful); the modulo bias is
    O(n / 2^64)."""
    return derive_seed(global_seed, *labels) % n
