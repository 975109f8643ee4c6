"""Counter-based RNG streams for reproducible, schedule-independent sampling.

Every stochastic unit of work (bootstrap replicate, simulation rep, moment
draw) owns a stream derived from a root seed and an integer path.  Streams
are independent of execution order, so parallel schedules cannot change
results.
"""

from __future__ import annotations

import numpy as np

__all__ = ["substream", "spawn_seed"]

# Fixed stream ids, so different consumers of one root seed never collide.
STREAM_DATA = 0
STREAM_FIT = 1
STREAM_MOMENTS = 2
STREAM_BOOT = 3
STREAM_GENERR = 4
STREAM_REP = 5


def substream(seed: int, *path: int) -> np.random.Generator:
    """Return a Philox generator for the (seed, path) coordinate.

    Philox is counter-based: streams with distinct spawn keys are
    statistically independent, and the mapping is a pure function of the
    arguments.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def spawn_seed(seed: int, *path: int) -> int:
    """Derive a 64-bit child seed from (seed, path), for APIs that take seeds."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
