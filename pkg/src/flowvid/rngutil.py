"""All randomness flows from one root seed via named sub-streams, so data
generation, init, training, and sampling can each be reproduced on their own."""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for (seed, name); stable across runs."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))
