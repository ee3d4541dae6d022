"""Named, keyed random streams.

Every random draw in a run comes from a generator derived from
``(seed, purpose, *keys)``. Purposes are fixed strings (``"topology"``,
``"fading"``, ...) and never include the protocol mode, so the three modes
see identical topology, mobility, traffic and fading draws for a seed.
"""

from __future__ import annotations

import zlib

import numpy as np

TOPOLOGY = "topology"
DATASET = "dataset"
VALIDATION = "validation"
MOBILITY = "mobility"
TRAFFIC = "traffic"
FADING = "fading"
TRAINING = "training"
DP_NOISE = "dp-noise"
MASKS = "masks"
SELECTION = "selection"
INIT = "init"


def _purpose_word(purpose: str) -> int:
    return zlib.crc32(purpose.encode("ascii"))


def stream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, purpose, *keys)``.

    Keys must be non-negative integers (device id, round, cluster, ...).
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, _purpose_word(purpose)]
    for k in keys:
        k = int(k)
        if k < 0:
            raise ValueError(f"stream keys must be non-negative, got {k}")
        entropy.append(k)
    return np.random.default_rng(np.random.SeedSequence(entropy))
