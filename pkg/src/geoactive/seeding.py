"""Derived seeds: one root seed per run, sub-seeds keyed by (tag, counters).

derive_seed(root, "scene", 7) mixes the root with the key path through
numpy's SeedSequence, so a sub-seed depends only on its key, never on the
order in which work items are scheduled.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def derive_seed(root: int, *path) -> int:
    ss = np.random.SeedSequence(int(root), spawn_key=tuple(_key(p) for p in path))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def derive_rng(root: int, *path) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *path))
