"""Deterministic random streams.

The parallel engine must produce identical results no matter how the world is
partitioned, so anything drawn inside the step loop is a *stateless* function
of the run seed plus the identifiers that name the decision (entity id,
timestep, message id).  Stateful ``random.Random`` streams are only used where
a single owner consumes the whole stream in a fixed order: world setup and the
per-entity mobility walk.
"""

from __future__ import annotations

import random

_MASK64 = (1 << 64) - 1

# Stream tags keep draws for different purposes out of each other's way.
SETUP = 0xA0
GENERATION = 0xA1
FORWARD = 0xA2
MOBILITY = 0xA3
LEVEL1 = 0xA4
SWEEP = 0xA5


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def mix(*keys: int) -> int:
    """Hash an arbitrary key tuple down to a 64-bit value."""
    h = 0x9E3779B97F4A7C15
    for k in keys:
        h = _splitmix64(h ^ _splitmix64(k & _MASK64))
    return h


def unit_uniform(*keys: int) -> float:
    """Uniform draw in [0, 1) fully determined by the key tuple."""
    # 53 bits is the full double mantissa; same construction as random.random.
    return (mix(*keys) >> 11) / float(1 << 53)


def substream(*keys: int) -> random.Random:
    """A fresh stateful stream whose seed is derived from the key tuple."""
    return random.Random(mix(*keys))
