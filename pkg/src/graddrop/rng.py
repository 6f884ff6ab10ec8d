"""Keyed counter-based random streams.

A stream is identified by a seed plus any tuple of integer or string keys
(epoch, batch, parameter name, ...). The same key always yields the same
Philox stream, so draws do not depend on the order they are requested in.
"""
from __future__ import annotations

import zlib

import numpy as np


def _word(key) -> int:
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"rng keys must be non-negative, got {key}")
        return int(key)
    if isinstance(key, str):
        # crc32 is stable across processes, unlike hash()
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"unsupported rng key {key!r}")


def keyed_rng(seed: int, *keys) -> np.random.Generator:
    words = [_word(seed)] + [_word(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))
