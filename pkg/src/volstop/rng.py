"""Counter-based random streams.

Streams are Philox generators keyed by ``(seed, index)`` so that a replication
(or a block of replications) sees the same numbers whatever the thread schedule.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, index: int = 0, *sub: int) -> np.random.Generator:
    """Independent generator for replication ``index`` (optionally sub-keyed)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(index), *map(int, sub)))
    return np.random.Generator(np.random.Philox(ss))


def block_ranges(n: int, block_size: int) -> list[tuple[int, int, int]]:
    """Split ``range(n)`` into ``(block_index, start, stop)`` triples."""
    return [(b, s, min(s + block_size, n)) for b, s in enumerate(range(0, n, block_size))]
