from __future__ import annotations

import logging

import numpy as np

logger = logging.getLogger("modelzoo")


def make_rng(
    seed: int | np.random.SeedSequence | np.random.Generator | None = None,
) -> np.random.Generator:
    """Create a PCG64 stream from a seed. Existing generators pass through as-is."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Derive `n` independent child streams from `rng`.

    Splitting advances the parent's seed sequence, so two calls on the same
    parent give different children, while a fresh parent built from the same
    seed always gives the same children.
    """
    if n < 0:
        raise ValueError(f"Cannot split a stream into {n} children")
    return rng.spawn(n)
