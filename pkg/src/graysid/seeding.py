"""Deterministic named random substreams.

Every source of randomness in the package derives from one root seed
through named, counter-based (Philox) substreams, so components can be
re-run independently and results do not depend on execution order or
worker count.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_word(part) -> int:
    """Map a path element to a stable uint32."""
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("substream path integers must be non-negative")
        return int(part) % (1 << 32)
    if isinstance(part, str):
        digest = hashlib.sha256(part.encode("utf-8")).digest()
        return int.from_bytes(digest[:4], "little")
    raise TypeError(f"unsupported substream path element: {part!r}")


def substream(root_seed: int, *path) -> np.random.Generator:
    """Return a Philox generator for the substream named by ``path``.

    The same ``(root_seed, path)`` always yields an identical stream,
    independently of any other stream drawn from elsewhere.
    """
    spawn_key = tuple(_key_word(p) for p in path)
    seq = np.random.SeedSequence(entropy=int(root_seed), spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(seq))
