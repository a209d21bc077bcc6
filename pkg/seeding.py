"""
Seeded random streams for reproducible experiments.

One run seed fans out into independent PCG64 generators, one per purpose, so
that e.g. changing the number of evaluation tasks never perturbs the tasks
drawn during training.
"""
import math

import numpy as np

# Stable spawn keys; never renumber an existing entry.
PURPOSES = {
    "init": 0,
    "tasks": 1,
    "rollouts": 2,
    "eval": 3,
    "curve": 4,
}


class SeedStreams:
    """Derives one independent generator per purpose from a run seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, purpose: str, index: int = 0) -> np.random.Generator:
        """
        Returns a fresh generator for (seed, purpose, index).

        Calling twice with the same arguments yields generators that produce
        identical sequences.
        """
        if purpose not in PURPOSES:
            raise KeyError(f"Unknown random stream purpose '{purpose}'.")
        sequence = np.random.SeedSequence(self.seed, spawn_key=(PURPOSES[purpose], int(index)))
        return np.random.Generator(np.random.PCG64(sequence))


def box_muller(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """
    Standard normal samples via the Box-Muller transform over rng.random().

    Both outputs of each uniform pair are used; an odd count drops the last
    sine branch.
    """
    n = int(np.prod(shape, dtype=np.int64))
    pairs = (n + 1) // 2
    u1 = rng.random(pairs)
    u2 = rng.random(pairs)
    # random() is in [0, 1); map to (0, 1] so the log is finite.
    radius = np.sqrt(-2.0 * np.log1p(-u1))
    angle = 2.0 * math.pi * u2
    samples = np.empty(2 * pairs)
    samples[0::2] = radius * np.cos(angle)
    samples[1::2] = radius * np.sin(angle)
    return samples[:n].reshape(shape)
