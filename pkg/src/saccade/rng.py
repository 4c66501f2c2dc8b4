"""Deterministic RNG substream derivation.

All randomness in a run flows from a single 64-bit seed. Named substreams
(dataset, init, rollout, probe, ...) are derived with SeedSequence spawn
keys built from a stable hash of the stream name plus integer indices, so
any component can recreate its generator from (seed, name, *indices) alone.
This is what makes checkpoint resume and per-example parallelism bitwise
reproducible.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Return the generator for a named substream of the run seed.

    The same (seed, name, indices) always yields an identical generator,
    independent of call order anywhere else in the program.
    """
    key = (zlib.crc32(name.encode("utf-8")),) + tuple(int(i) for i in indices)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))
