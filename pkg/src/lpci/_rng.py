"""Seed derivation.

Child seeds are derived from a master seed and a tuple of keys by hashing
``"<master>/<key1>/<key2>/..."`` with SHA-256 and keeping the first 8 bytes
(masked to 63 bits). Adding a new component never perturbs another one's
stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *keys: object) -> int:
    text = "/".join([str(int(master))] + [str(k) for k in keys])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def make_rng(master: int, *keys: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))
