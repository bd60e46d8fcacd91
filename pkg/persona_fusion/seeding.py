"""Named random substreams derived from a single experiment seed.

Every consumer of randomness (parameter init, data shuffling, negative sampling,
dropout, synthetic data) asks for its own stream, so changing how many numbers
one consumer draws never shifts the numbers another consumer sees.
"""

import zlib

import numpy as np


def stable_key(text: str) -> int:
    """Process-independent 32-bit key for a string (``hash`` is salted per process)."""
    return zlib.crc32(text.encode("utf-8"))


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Return the generator for stream ``name`` under ``seed``, refined by integer ``keys``.

    Args:
        seed: Experiment seed (non-negative)
        name: Stream name, e.g. "init", "shuffle", "negatives", "dropout"
        *keys: Extra integers such as an epoch number or example key

    Returns:
        A fresh ``numpy.random.Generator``; equal arguments give identical streams
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    spawn_key = (stable_key(name), *(int(k) for k in keys))
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=spawn_key))


def derive_seed(seed: int, name: str, *keys: int) -> int:
    """A non-negative integer seed drawn from stream ``name``, e.g. the per-epoch negative-sampling seed."""
    return int(substream(seed, name, *keys).integers(0, 2**62))
