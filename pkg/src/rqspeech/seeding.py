"""Deterministic, key-derived random streams.

Every random draw in the pipeline (mask starts, substitution noise, crop
offsets, shuffles, ...) comes from a generator keyed by the global seed plus a
tuple of labels such as (epoch, utterance id, purpose).  Results are therefore
a pure function of the keys and never depend on batch composition, worker
count, or scheduling order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_word(key) -> int:
    """Map one key component to a stable 64-bit word.

    Strings are hashed with blake2b; Python's built-in hash() is salted per
    process and must not leak into the stream derivation.
    """
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    if isinstance(key, str):
        digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"unsupported rng key type: {type(key).__name__}")


def keyed_rng(seed: int, *keys) -> np.random.Generator:
    """Generator derived from (seed, *keys); identical keys give identical streams."""
    words = [_key_word(seed)] + [_key_word(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))
