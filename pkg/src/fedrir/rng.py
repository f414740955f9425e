"""Named random streams derived from one master seed.

Each stream is keyed by a tag and integer ids, so the random numbers a client
sees in round t do not depend on which other clients ran first.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "data": 0,
    "partition": 1,
    "split": 2,
    "global_init": 3,
    "client_init": 4,
    "server": 5,
    "client_round": 6,
    "eval": 7,
}


def stream(seed: int, name: str, *ids: int) -> np.random.Generator:
    if name not in STREAMS:
        raise KeyError(f"unknown rng stream {name!r}")
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=(STREAMS[name], *map(int, ids)))
    return np.random.Generator(np.random.Philox(seq))


def round_half_up(x: float) -> int:
    """Nearest integer, halves rounded away from zero for x >= 0."""
    return int(np.floor(x + 0.5))
