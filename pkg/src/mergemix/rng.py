"""Deterministic random number generation.

Every stochastic choice in this package flows through the xoshiro256**
generator seeded via splitmix64.  Both algorithms are fixed-width 64-bit
integer recurrences, so identically seeded streams produce identical draws
on every platform and Python build; nothing here depends on the stdlib
``random`` module or on NumPy's generators.

Two implementations share one stream definition:

* :class:`Rng` - scalar generator over Python ints, used for data
  generation, shuffles, and anywhere sequential draws are cheap.
* the ``*_block`` helpers - NumPy uint64 lane-parallel generators that
  advance many independent streams at once, used on the per-sample mixing
  path.  Stream ``i`` of a block is bit-identical to
  ``Rng(derive_seed(base, i))``.

Gaussians come from the Box-Muller transform applied to consecutive
uniform pairs; a request for ``n`` gaussians always consumes exactly
``ceil(n / 2)`` pairs so stream positions stay predictable.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_SPLITMIX_M1 = 0xBF58476D1CE4E5B9
_SPLITMIX_M2 = 0x94D049BB133111EB
_INV_2_53 = 2.0 ** -53


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state once; returns (new_state, output)."""
    state = (state + _SPLITMIX_GAMMA) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * _SPLITMIX_M1) & _MASK64
    z = ((z ^ (z >> 27)) * _SPLITMIX_M2) & _MASK64
    return state, z ^ (z >> 31)


def seed_state(seed: int) -> tuple[int, int, int, int]:
    """Expand a 64-bit seed into the four xoshiro256** state words."""
    s = seed & _MASK64
    out = []
    for _ in range(4):
        s, z = splitmix64(s)
        out.append(z)
    return tuple(out)


def derive_seed(base_seed: int, index: int) -> int:
    """Per-sample stream seed: base plus sample index, wrapped to 64 bits."""
    return (base_seed + index) & _MASK64


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """Scalar xoshiro256** stream over Python integers."""

    __slots__ = ("s0", "s1", "s2", "s3")

    def __init__(self, seed: int):
        self.s0, self.s1, self.s2, self.s3 = seed_state(seed)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s0, self.s1, self.s2, self.s3
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s0, self.s1, self.s2, self.s3 = s0, s1, s2, s3
        return result

    def uniform(self) -> float:
        """One double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * _INV_2_53

    def uniforms(self, n: int) -> np.ndarray:
        return np.array([self.uniform() for _ in range(n)], dtype=np.float64)

    def randint(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection on the top range."""
        if n <= 0:
            raise ValueError("randint requires n >= 1")
        bound = _MASK64 + 1 - ((_MASK64 + 1) % n)
        while True:
            x = self.next_u64()
            if x < bound:
                return x % n

    def gaussians(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller; consumes ceil(n/2) pairs."""
        out = np.empty(n, dtype=np.float64)
        for i in range(0, n, 2):
            u1 = self.uniform()
            u2 = self.uniform()
            r = math.sqrt(-2.0 * math.log(1.0 - u1))
            theta = 2.0 * math.pi * u2
            out[i] = r * math.cos(theta)
            if i + 1 < n:
                out[i + 1] = r * math.sin(theta)
        return out

    def gaussian(self) -> float:
        return float(self.gaussians(1)[0])

    def _gamma(self, shape: float) -> float:
        """Marsaglia-Tsang gamma variate; shape boosting below 1."""
        if shape < 1.0:
            u = self.uniform()
            while u <= 0.0:
                u = self.uniform()
            return self._gamma(shape + 1.0) * u ** (1.0 / shape)
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.gaussian()
            v = (1.0 + c * x) ** 3
            if v <= 0.0:
                continue
            u = self.uniform()
            if u < 1.0 - 0.0331 * x ** 4:
                return d * v
            if u > 0.0 and math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
                return d * v

    def beta(self, a: float, b: float | None = None) -> float:
        """Beta(a, b) variate; Beta(1, 1) short-circuits to one uniform."""
        if b is None:
            b = a
        if a <= 0.0 or b <= 0.0:
            raise ValueError("beta parameters must be positive")
        if a == 1.0 and b == 1.0:
            return self.uniform()
        x = self._gamma(a)
        y = self._gamma(b)
        return x / (x + y)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> np.ndarray:
        idx = list(range(n))
        self.shuffle(idx)
        return np.array(idx, dtype=np.int64)

    def derangement(self, n: int) -> np.ndarray:
        """Permutation with no fixed point, by rejection; n == 1 maps to itself."""
        if n <= 1:
            return np.zeros(max(n, 0), dtype=np.int64)
        while True:
            perm = self.permutation(n)
            if not np.any(perm == np.arange(n)):
                return perm


# ---------------------------------------------------------------------------
# Lane-parallel streams.  State is a (n, 4) uint64 array; every helper
# advances all lanes in lockstep with wrapping uint64 arithmetic.
# ---------------------------------------------------------------------------

_U5 = np.uint64(5)
_U9 = np.uint64(9)
_U7 = np.uint64(7)
_U57 = np.uint64(57)
_U17 = np.uint64(17)
_U45 = np.uint64(45)
_U19 = np.uint64(19)
_U11 = np.uint64(11)


def block_states(base_seed: int, indices: np.ndarray) -> np.ndarray:
    """Initial xoshiro states for streams base_seed + indices, one per lane."""
    seeds = (np.uint64(base_seed & _MASK64) + indices.astype(np.uint64))
    gamma = np.uint64(_SPLITMIX_GAMMA)
    m1 = np.uint64(_SPLITMIX_M1)
    m2 = np.uint64(_SPLITMIX_M2)
    states = np.empty((len(seeds), 4), dtype=np.uint64)
    s = seeds.copy()
    for k in range(4):
        s = s + gamma
        z = s.copy()
        z = (z ^ (z >> np.uint64(30))) * m1
        z = (z ^ (z >> np.uint64(27))) * m2
        states[:, k] = z ^ (z >> np.uint64(31))
    return states


def block_next_u64(states: np.ndarray) -> np.ndarray:
    """Advance every lane once; returns one uint64 per lane."""
    s0 = states[:, 0]
    s1 = states[:, 1]
    s2 = states[:, 2]
    s3 = states[:, 3]
    x = s1 * _U5
    result = ((x << _U7) | (x >> _U57)) * _U9
    t = s1 << _U17
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    states[:, 3] = ((s3 << _U45) | (s3 >> _U19))
    return result


def block_uniforms(states: np.ndarray, n: int) -> np.ndarray:
    """(lanes, n) doubles in [0, 1); lane rows match scalar Rng.uniform runs."""
    cols = [(block_next_u64(states) >> _U11).astype(np.float64) * _INV_2_53
            for _ in range(n)]
    return np.stack(cols, axis=1)


def block_gaussians(states: np.ndarray, n: int) -> np.ndarray:
    """(lanes, n) standard normals; same Box-Muller chain as Rng.gaussians."""
    pairs = (n + 1) // 2
    u = block_uniforms(states, 2 * pairs)
    u1 = u[:, 0::2]
    u2 = u[:, 1::2]
    r = np.sqrt(-2.0 * np.log(1.0 - u1))
    theta = 2.0 * np.pi * u2
    out = np.empty((u.shape[0], 2 * pairs), dtype=np.float64)
    out[:, 0::2] = r * np.cos(theta)
    out[:, 1::2] = r * np.sin(theta)
    return out[:, :n]
