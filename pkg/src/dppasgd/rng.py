"""Counter-based random streams.

Every random draw in a simulation is addressed by ``(root_seed, device,
iteration, purpose)``. The key of a Philox generator is derived from
``(root_seed, device, purpose)`` and the iteration is written into the
counter, so the stream for one (device, iteration) cell can be rebuilt
in isolation without replaying earlier draws. Execution order of devices
therefore never changes the numbers a device sees.
"""

from __future__ import annotations

import os
from enum import IntEnum
from functools import lru_cache

import numpy as np

SEED_ENV = "DP_PASGD_SEED"


class Purpose(IntEnum):
    BATCH = 1
    NOISE = 2
    SPLIT = 3
    PARTITION = 4
    PROBE = 5


def default_seed(fallback: int = 0) -> int:
    value = os.environ.get(SEED_ENV)
    if value is None or value.strip() == "":
        return fallback
    return int(value)


@lru_cache(maxsize=4096)
def _key(root_seed: int, device: int, purpose: int) -> tuple[int, int]:
    state = np.random.SeedSequence([root_seed, device, purpose]).generate_state(2, np.uint64)
    return int(state[0]), int(state[1])


def stream(root_seed: int, device: int = 0, iteration: int = 0,
           purpose: Purpose | int = Purpose.NOISE) -> np.random.Generator:
    """Generator for one (device, iteration) cell of a given purpose."""
    if root_seed < 0 or device < 0 or iteration < 0:
        raise ValueError("seed, device and iteration must be non-negative")
    key = np.array(_key(int(root_seed), int(device), int(purpose)), dtype=np.uint64)
    # counter[0] advances as blocks are consumed; the iteration sits in a
    # higher word so neighbouring cells never overlap.
    counter = np.array([0, 0, iteration, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))
