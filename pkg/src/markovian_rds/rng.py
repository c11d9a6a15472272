"""Reproducible random streams.

Every stream is a Philox4x64 counter-based generator keyed by a
``SeedSequence(master_seed, spawn_key=(stream,))``. Stream ``i`` therefore
depends only on ``(master_seed, i)``, never on how many other streams were
drawn before it or on which worker draws it.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, stream: int) -> int:
    """A 64-bit child seed, for APIs that take a plain integer."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
