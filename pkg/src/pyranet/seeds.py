"""Labelled seed derivation: one user seed fans out into independent module streams."""
from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed"]


def derive_seed(seed: int, label: str) -> int:
    """Deterministic 63-bit seed for the stream called ``label`` under ``seed``."""
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF] + [
        int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)
    ]
    return int(np.random.SeedSequence(words).generate_state(1, np.uint64)[0] >> np.uint64(1))
