"""Named deterministic random streams.

Every stochastic call site draws from its own counter-based (Philox)
generator derived from (root seed, *path). Streams are independent of
creation order and of each other, so corpus generation, parameter init
and random baselines reproduce exactly regardless of scheduling.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _token_to_int(token) -> int:
    if isinstance(token, (int, np.integer)):
        return int(token) & _MASK64
    if isinstance(token, str):
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"stream path tokens must be int or str, got {type(token)!r}")


def stream(seed: int, *path) -> np.random.Generator:
    """Return the generator for the stream named by (seed, *path)."""
    entropy = [int(seed) & _MASK64] + [_token_to_int(t) for t in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
