"""Counter-based random numbers keyed by integer tuples.

Each draw is a pure function of ``(seed, *keys)`` -- e.g. (seed, scene, element,
vertex, axis) -- so values do not depend on generation order or on how work is
split across workers. The mixer is the SplitMix64 finaliser applied along the
key chain.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _as_u64(a) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype.kind == "u":
        return a.astype(np.uint64)
    return (np.asarray(a, dtype=object) & _MASK).astype(np.uint64) if a.dtype == object \
        else a.astype(np.int64).astype(np.uint64)


def keyed_bits(seed: int, *keys) -> np.ndarray:
    """64 random bits per broadcast position of ``keys``."""
    with np.errstate(over="ignore"):
        h = _mix64(np.uint64(seed & _MASK) + _GOLDEN)
        for i, k in enumerate(keys):
            salt = np.uint64(((i + 2) * 0x9E3779B97F4A7C15) & _MASK)
            h = _mix64(h ^ (_as_u64(k) + salt))
    return np.asarray(h)


def keyed_uniform(seed: int, *keys) -> np.ndarray:
    """Uniform on [0, 1) with 53-bit resolution."""
    return (keyed_bits(seed, *keys) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def keyed_centered_uniform(seed: int, *keys) -> np.ndarray:
    """Uniform on the open interval (-0.5, 0.5); never exactly +-0.5."""
    k = (keyed_bits(seed, *keys) >> np.uint64(11)).astype(np.float64)
    return (k + 0.5) * 2.0 ** -53 - 0.5


def keyed_normal(seed: int, *keys) -> np.ndarray:
    """Standard normal via Box-Muller on two keyed streams (extra trailing key 0/1)."""
    u1 = 1.0 - keyed_uniform(seed, *keys, 0)  # (0, 1]
    u2 = keyed_uniform(seed, *keys, 1)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def scene_generator(seed: int, index: int) -> np.random.Generator:
    """Independent numpy stream for scene-level choices (layout, speeds)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & _MASK, index])))
