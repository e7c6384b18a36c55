"""Small, fully specified integer mixers and generators.

Two primitives are used across the package so that runs are reproducible
independently of numpy's generator internals:

``fmix64``
    The 64-bit finalizer from MurmurHash3::

        k ^= k >> 33
        k *= 0xff51afd7ed558ccd
        k ^= k >> 33
        k *= 0xc4ceb9fe1a85ec53
        k ^= k >> 33

    (all arithmetic modulo 2**64). Used for routing image ids to slowgears.

``splitmix64``
    Output ``i`` (0-based) of the stream for ``seed`` is
    ``mix(seed + (i + 1) * 0x9E3779B97F4A7C15)`` where::

        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        z =  z ^ (z >> 31)

    Uniform doubles take the top 53 bits: ``(x >> 11) * 2**-53``. Normal
    draws use the cosine branch of Box-Muller on consecutive pairs
    ``(u1, u2)``: ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def fmix64(k):
    """fmix64 of a Python int, or elementwise over a uint64 array."""
    if isinstance(k, np.ndarray):
        k = k.astype(np.uint64)
        with np.errstate(over="ignore"):
            k = k ^ (k >> np.uint64(33))
            k = k * np.uint64(0xFF51AFD7ED558CCD)
            k = k ^ (k >> np.uint64(33))
            k = k * np.uint64(0xC4CEB9FE1A85EC53)
        return k ^ (k >> np.uint64(33))
    k = int(k) & MASK64
    k ^= k >> 33
    k = (k * 0xFF51AFD7ED558CCD) & MASK64
    k ^= k >> 33
    k = (k * 0xC4CEB9FE1A85EC53) & MASK64
    k ^= k >> 33
    return k


def splitmix64(seed: int, n: int) -> np.ndarray:
    """Return the first ``n`` outputs of the splitmix64 stream as uint64."""
    seed = np.uint64(seed & MASK64)
    idx = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = seed + idx * np.uint64(GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def uniform(seed: int, n: int) -> np.ndarray:
    """``n`` float64 draws in [0, 1)."""
    return (splitmix64(seed, n) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def normal(seed: int, n: int, std: float = 1.0) -> np.ndarray:
    """``n`` float64 draws from N(0, std**2) via Box-Muller."""
    u = uniform(seed, 2 * n)
    u1, u2 = u[0::2], u[1::2]
    return std * np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)


def derive(seed: int, *tags: int) -> int:
    """Child seed for a named sub-stream: fmix64 folded over the tags."""
    h = fmix64(seed)
    for t in tags:
        h = fmix64(h ^ (t & MASK64))
    return h


def permutation(seed: int, n: int) -> np.ndarray:
    return np.argsort(uniform(seed, n), kind="stable")
