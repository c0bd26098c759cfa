"""Parameter initializers."""

from __future__ import annotations

import numpy as np

from lqgan.autodiff.tensor import DEFAULT_DTYPE


def lecun_normal(shape, fan_in: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """i.i.d. N(0, 1/fan_in) entries drawn from ``rng``."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    return (rng.standard_normal(tuple(shape)) / np.sqrt(fan_in)).astype(dtype)
