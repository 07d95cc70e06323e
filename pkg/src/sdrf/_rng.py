"""Deterministic random-number stream derivation.

Every stochastic operation in the package takes an explicit seed and derives
its generator through `derive_rng`, so results are reproducible and
independent of call order or worker scheduling.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _as_entropy(key) -> int:
    if isinstance(key, str):
        return int.from_bytes(key.encode("utf-8"), "little")
    if isinstance(key, (tuple, list)):
        # fold nested keys into a single integer deterministically
        acc = 0
        for k in key:
            acc = (acc * 0x9E3779B97F4A7C15 + _as_entropy(k)) & _MASK64
        return acc
    return int(key) & _MASK64


def derive_rng(*keys) -> np.random.Generator:
    """Generator seeded from an arbitrary mix of ints and context strings."""
    entropy = [_as_entropy(k) for k in keys] or [0]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(*keys) -> int:
    """64-bit integer sub-seed, for APIs that want a plain int."""
    return int(derive_rng(*keys).integers(0, _MASK64, dtype=np.uint64))
