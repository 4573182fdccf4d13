"""Portable pseudo-random generator used for synthetic ensembles.

The generator is xoshiro256** seeded through splitmix64.  Both algorithms
are defined on 64-bit unsigned integers only, so a given seed produces the
same stream on every platform and Python version.

Derived quantities:

* ``next_u64()``   raw 64-bit output.
* ``uniform()``    ``(next_u64() >> 11) * 2**-53``, a double in [0, 1).
* ``uniform(a, b)`` ``a + (b - a) * uniform()``.
* ``integers(lo, hi)`` inclusive range via ``lo + floor(uniform() * (hi - lo + 1))``.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


class Xoshiro256:
    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be a non-negative integer")
        state = seed & _MASK
        s = []
        for _ in range(4):
            state, out = splitmix64(state)
            s.append(out)
        self._s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)
        return low + (high - low) * u

    def integers(self, low: int, high: int) -> int:
        """Uniform integer in the closed range ``[low, high]``."""
        if high < low:
            raise ValueError("empty integer range")
        return low + int(self.uniform() * (high - low + 1))

    def spawn(self, key: int) -> "Xoshiro256":
        """Independent child stream derived from this generator and ``key``."""
        return Xoshiro256((self.next_u64() ^ (key * 0x9E3779B97F4A7C15)) & _MASK)
