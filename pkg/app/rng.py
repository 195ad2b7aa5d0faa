"""Deterministic random streams.

Every stochastic choice in a run draws from a stream derived from the run seed and a
tag, never from global state, so a run can be resumed mid-way and continue exactly.
"""

import hashlib
import random
from typing import Union

import numpy as np


def derive_seed(seed: int, *salt: Union[str, int]) -> int:
    """Stable 32-bit sub-seed for (seed, salt...). Uses sha256, never hash()."""
    tag = "::".join([str(int(seed))] + [str(s) for s in salt])
    return int(hashlib.sha256(tag.encode("utf-8")).hexdigest()[:8], 16)


def stream(seed: int, *salt: Union[str, int]) -> random.Random:
    return random.Random(derive_seed(seed, *salt))


def numpy_stream(seed: int, *salt: Union[str, int]) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *salt))
