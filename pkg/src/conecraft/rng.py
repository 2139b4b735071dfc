"""Counter-based random streams for reproducible parallel Monte Carlo."""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def seed_stream(master_seed, stream_id):
    """Independent generator derived purely from (master_seed, stream_id).

    Streams are Philox counter-based: the state is a function of the key
    alone, so any subset of streams can be created in any order on any
    worker and still reproduce exactly.
    """
    key = np.array([int(master_seed) & _MASK, int(stream_id) & _MASK],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
