"""Counter-based deterministic noise streams.

Every random quantity in the simulator (drift deviations, RX jitter, cable
lengths, traffic arrivals, ...) is a pure function of a 64-bit stream key
and a counter, derived with the splitmix64 finalizer.  This makes any value
reproducible in isolation: no draw depends on the order of other draws, and
the scalar and numpy paths return bit-identical results.

The recurrence, for cross-implementation replay:

    raw(key, ctr) = finalize((key + ctr * GAMMA) mod 2^64)
    finalize(z):  z ^= z >> 30; z *= MIX1; z ^= z >> 27; z *= MIX2; z ^= z >> 31
    uniform(key, ctr, h) = raw(key, ctr) mod (2h + 1) - h        # in [-h, +h]

with GAMMA = 0x9E3779B97F4A7C15, MIX1 = 0xBF58476D1CE4E5B9,
MIX2 = 0x94D049BB133111EB, all arithmetic modulo 2^64.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB

# Stream tags keep unrelated noise sources statistically independent even
# when they share the run seed.
TAG_DRIFT = 0x01
TAG_RX = 0x02
TAG_TX = 0x03
TAG_CABLE = 0x04
TAG_PHASE = 0x05
TAG_TRAFFIC = 0x06
TAG_MEDIAN = 0x07
TAG_TEMP_SIGN = 0x08
TAG_GRAPH = 0x09
TAG_PROC = 0x0A


def finalize(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * MIX1) & _MASK
    z = ((z ^ (z >> 27)) * MIX2) & _MASK
    return z ^ (z >> 31)


def stream_key(*parts: int) -> int:
    """Fold integers (seed, tag, ids...) into one 64-bit stream key."""
    h = 0
    for p in parts:
        h = finalize((h + GAMMA + (p & _MASK)) & _MASK)
    return h


def raw(key: int, counter: int) -> int:
    return finalize((key + counter * GAMMA) & _MASK)


def uniform(key: int, counter: int, half_width: int) -> int:
    """Uniform integer in [-half_width, +half_width]."""
    if half_width <= 0:
        return 0
    return raw(key, counter) % (2 * half_width + 1) - half_width


def unit(key: int, counter: int) -> float:
    """Uniform float in [0, 1)."""
    return raw(key, counter) / 2.0**64


def raw_array(key: int, start: int, count: int) -> np.ndarray:
    """Vector of raw(key, start + j) for j in range(count), dtype uint64."""
    ctr = np.arange(start, start + count, dtype=np.uint64)
    z = np.uint64(key) + ctr * np.uint64(GAMMA)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


def raw_keys_array(keys: np.ndarray, counter: int) -> np.ndarray:
    """raw(key_i, counter) for a vector of keys."""
    z = keys.astype(np.uint64) + np.uint64((counter * GAMMA) & _MASK)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


def uniform_array(key: int, start: int, count: int, half_width: int) -> np.ndarray:
    """Vector of uniform(key, start + j, half_width), dtype int64."""
    if half_width <= 0:
        return np.zeros(count, dtype=np.int64)
    r = raw_array(key, start, count) % np.uint64(2 * half_width + 1)
    return r.astype(np.int64) - half_width


def uniform_keys_array(keys: np.ndarray, counter: int, half_widths: np.ndarray) -> np.ndarray:
    """Per-key uniform draw in [-h_i, +h_i] at one shared counter."""
    r = raw_keys_array(keys, counter)
    span = (2 * half_widths + 1).astype(np.uint64)
    out = (r % span).astype(np.int64) - half_widths
    return np.where(half_widths > 0, out, 0)
