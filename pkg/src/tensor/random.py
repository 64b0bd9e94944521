"""Named, seedable random streams."""

import numpy as np

# Stream order is part of the reproducibility contract: append, never reorder.
STREAMS = ("init", "sample", "synth", "bo", "gradcheck", "split", "train")


def make_rng(seed: int, stream: str) -> np.random.Generator:
    """PCG64 generator for ``stream``, independent of every other stream of the same seed."""
    if stream not in STREAMS:
        raise KeyError(f"unknown random stream {stream!r}")
    sequence = np.random.SeedSequence(seed, spawn_key=(STREAMS.index(stream),))
    return np.random.Generator(np.random.PCG64(sequence))


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)
