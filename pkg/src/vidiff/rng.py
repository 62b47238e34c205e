"""Seeded random streams.

All randomness goes through numpy's PCG64 bit generator keyed by a
``SeedSequence(entropy=seed, spawn_key=(stream,))``. Two different stream ids
under one seed are statistically independent, and a given ``(seed, stream)``
pair always reproduces the same draws, regardless of how work is scheduled.
"""
import numpy as np

ALGORITHM = "PCG64/SeedSequence(entropy=seed, spawn_key=(stream,))"


def stream(seed, stream_id=0):
    """Generator for the ``(seed, stream_id)`` stream."""
    if seed is None:
        raise ValueError("seed must be explicit")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream_id),))
    return np.random.Generator(np.random.PCG64(ss))
