"""Counter-based seed derivation.

Every random stream in a run is derived from the master seed plus a tuple of
keys (stage name, language, epoch, ...), so any stage can be re-run on its own
and reproduce the same numbers.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *keys: object) -> int:
    h = hashlib.sha256(str(int(master)).encode())
    for key in keys:
        h.update(b"\x1f")
        h.update(str(key).encode())
    return int.from_bytes(h.digest()[:8], "little")


def rng_for(master: int, *keys: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))
