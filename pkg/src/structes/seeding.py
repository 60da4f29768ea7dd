"""Stateless 64-bit seed mixing.

Everything random in the package is keyed by integers passed through the
SplitMix64 finalizer, so the coordinator and every worker can rebuild the
same stream from ``(master_seed, iteration)`` without talking to each other.
"""

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z):
    """SplitMix64 output function applied to a 64-bit state."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def derive_iteration_seed(master_seed, iteration):
    """Seed for one optimization iteration.

    This is the ``(iteration + 1)``-th output of a SplitMix64 generator
    started at ``master_seed``; ``derive_iteration_seed(0, 0)`` is
    ``0xE220A8397B1DCDAF``.
    """
    if iteration < 0:
        raise ValueError(f"iteration must be non-negative, got {iteration}")
    state = (int(master_seed) + (int(iteration) + 1) * GOLDEN_GAMMA) & MASK64
    return mix64(state)


def mix64_array(states):
    """Vectorized :func:`mix64` over an array of uint64 states."""
    z = np.asarray(states, dtype=np.uint64).copy()
    with np.errstate(over="ignore"):
        z ^= z >> np.uint64(30)
        z *= np.uint64(_M1)
        z ^= z >> np.uint64(27)
        z *= np.uint64(_M2)
        z ^= z >> np.uint64(31)
    return z


def counter_uniforms(seed, counters):
    """Uniforms in [0, 1) that depend only on ``(seed, counter)``.

    Used for evaluation noise, where the draw for the k-th call must not
    depend on how calls were batched.
    """
    c = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        states = np.uint64(int(seed) & MASK64) + (c + np.uint64(1)) * np.uint64(GOLDEN_GAMMA)
    bits = mix64_array(states) >> np.uint64(11)
    return bits.astype(np.float64) * (1.0 / 9007199254740992.0)


def counter_normals(seed, counters):
    """Standard normals keyed by ``(seed, counter)`` via Box-Muller."""
    c = np.asarray(counters, dtype=np.uint64)
    u1 = counter_uniforms(seed, c * np.uint64(2))
    u2 = counter_uniforms(seed, c * np.uint64(2) + np.uint64(1))
    return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)


def make_rng(seed):
    """Return a numpy Generator for an int seed (or pass a Generator through)."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(int(seed) & MASK64)
