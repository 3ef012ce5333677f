"""Deterministic random-stream derivation.

One root seed per experiment; every consumer derives its own child stream
from (root, *keys) so that serial and parallel runs consume identical
randomness regardless of scheduling order.
"""

import zlib

import numpy as np

__all__ = ["substream", "stream_key"]


def stream_key(key) -> int:
    """Map a string or int key to a stable 32-bit integer."""
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"stream keys must be int or str, got {type(key).__name__}")


def substream(root_seed: int, *keys) -> np.random.Generator:
    """Child generator keyed by (root_seed, *keys).

    The same tuple always yields the same stream; distinct tuples yield
    independent streams. Keys may be ints or short purpose strings such
    as "env" or "rollout".
    """
    entropy = [int(root_seed) & 0xFFFFFFFFFFFFFFFF] + [stream_key(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
