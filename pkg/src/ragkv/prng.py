"""SplitMix64 as a counter-based generator.

Output ``i`` of stream ``seed`` is ``mix64(seed + (i + 1) * GOLDEN)`` with the
standard SplitMix64 finalizer, all arithmetic modulo 2**64. Doubles in [0, 1)
take the top 53 bits: ``(x >> 11) * 2**-53``. The mapping is fully specified,
so a given seed yields the same bytes in any language.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64(seed: int, start: int, count: int) -> np.ndarray:
    """Outputs ``start .. start+count-1`` of the stream for ``seed`` as uint64."""
    counters = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    z = np.uint64(seed % 2**64) + counters * GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def uniform(seed: int, start: int, count: int) -> np.ndarray:
    """Doubles in [0, 1) from the same counter positions."""
    bits = splitmix64(seed, start, count) >> np.uint64(11)
    return bits.astype(np.float64) * 2.0**-53
