"""Named, counter-based random substreams.

Every random decision in a run draws from a Philox stream keyed by the run
seed plus a purpose path such as ``("offspring", 3, 7)``. Streams never share
state, so evaluation order and thread scheduling cannot change the draws, and
a resumed run regenerates exactly the streams an uninterrupted run would use.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(seed: int, *path: object) -> int:
    text = "/".join([str(int(seed)), *(str(p) for p in path)])
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:16], "big")


def substream(seed: int, *path: object) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_key(seed, *path)))


def derive_seed(seed: int, *path: object, bits: int = 31) -> int:
    """A nonnegative integer seed (default < 2**31, which most T2I APIs accept)."""
    return derive_key(seed, *path) % (1 << bits)
