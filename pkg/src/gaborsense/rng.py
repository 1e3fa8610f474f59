"""Seedable 64-bit mixing PRNG with a documented output order.

All randomness in the toolkit flows through SplitMix64 so that identical
seeds produce identical artifacts across runs, machines, and degrees of
parallelism. The generator advances an internal counter by a fixed odd
constant (GAMMA) and finalizes each counter value with the mix64 avalanche
function. Doubles are built from the top 53 bits of each output word, so
the k-th double of a stream is a pure function of (seed, k).
"""

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GAMMA = 0x9E3779B97F4A7C15

_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """Finalizing avalanche: xor-shift/multiply scramble of a 64-bit word."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, index: int) -> int:
    """Child seed for stream `index`: mix64(master + (index + 1) * GAMMA).

    Any child stream can be regenerated from (master_seed, index) alone,
    which is what lets sweep workers run out of order.
    """
    return mix64((master_seed + (index + 1) * GAMMA) & MASK64)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= np.uint64(_MIX1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_MIX2)
    z ^= z >> np.uint64(31)
    return z


class SplitMix64:
    """Sequential generator over the mix64 counter stream.

    Output order: the i-th u64 (0-based) of a stream seeded with s is
    mix64(s + (i + 1) * GAMMA). Block and scalar draws interleave freely;
    `next_u64_block(n)` is exactly n scalar draws.
    """

    def __init__(self, seed: int):
        self._state = seed & MASK64

    def next_u64(self) -> int:
        self._state = (self._state + GAMMA) & MASK64
        return mix64(self._state)

    def next_f64(self) -> float:
        """Uniform double in [0, 1), built from the top 53 bits."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.next_f64()

    def next_u64_block(self, n: int) -> np.ndarray:
        counters = (
            np.uint64(self._state)
            + np.uint64(GAMMA) * np.arange(1, n + 1, dtype=np.uint64)
        )
        self._state = (self._state + n * GAMMA) & MASK64
        return _mix64_array(counters)

    def next_f64_block(self, n: int) -> np.ndarray:
        bits = self.next_u64_block(n) >> np.uint64(11)
        return bits.astype(np.float64) * 2.0 ** -53

    def uniform_block(self, lo: float, hi: float, n: int) -> np.ndarray:
        return lo + (hi - lo) * self.next_f64_block(n)
