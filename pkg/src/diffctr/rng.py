"""Counter-based random streams.

A generator is addressed by (seed, *path) and is independent of every
other stream, so the order in which code draws from different streams
never changes any result. Path parts may be ints or short strings.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF


def _word(part: int | str) -> int:
    if isinstance(part, str):
        digest = hashlib.blake2s(part.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    return int(part) & _MASK64


def stream(seed: int, *path: int | str) -> np.random.Generator:
    """Return the Philox generator addressed by (seed, *path)."""
    entropy = [_word(seed)] + [_word(p) for p in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
