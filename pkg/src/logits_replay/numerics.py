"""Dense numeric kernel: stable softmax / log-sum-exp, small vector helpers and a
counter-based random generator.

Everything here works on 64-bit floats. Vector helpers accept anything
``np.asarray`` understands and return numpy arrays or Python floats.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericError

__all__ = [
    "softmax",
    "log_softmax",
    "log_sum_exp",
    "l2_norm",
    "dot",
    "matvec",
    "outer",
    "Rng",
]


def _as_vector(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {z.shape}")
    if z.size == 0:
        raise DimensionError("empty vector")
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite entry in input vector")
    return z


def softmax(z) -> np.ndarray:
    """Shift-stabilised softmax of a 1-D logit vector."""
    z = _as_vector(z)
    e = np.exp(z - z.max())
    return e / e.sum()


def log_sum_exp(z) -> float:
    """``max(z) + log(sum(exp(z - max(z))))``; exact for a singleton."""
    z = _as_vector(z)
    zmax = z.max()
    if z.size == 1:
        return float(zmax)
    return float(zmax + np.log(np.exp(z - zmax).sum()))


def log_softmax(z) -> np.ndarray:
    z = _as_vector(z)
    return z - log_sum_exp(z)


def l2_norm(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    return float(np.sqrt(np.dot(v.ravel(), v.ravel())))


def dot(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    return float(np.dot(a, b))


def matvec(m, v) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise DimensionError(f"cannot multiply {m.shape} by {v.shape}")
    return m @ v


def outer(a, b) -> np.ndarray:
    return np.outer(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))


# SplitMix64 constants (Steele, Lea & Flood 2014).
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _mix_int(x: int) -> int:
    return int(_mix(np.array([x & _MASK64], dtype=np.uint64))[0])


class Rng:
    """SplitMix64 stream addressed by (seed, counter).

    Output ``i`` (1-based) is ``mix(seed + i * GAMMA)``, which is the classic
    sequential SplitMix64 stream, but any block of it can be produced with one
    vectorised numpy call. Not thread-safe; derive one instance per worker
    with :meth:`spawn`.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed > _MASK64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.counter = 0

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def u64(self, n: int) -> np.ndarray:
        """The next ``n`` raw 64-bit outputs."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(np.uint64(self.seed) + idx * _GAMMA)

    def next_u64(self) -> int:
        return int(self.u64(1)[0])

    def random(self, size: int | tuple[int, ...] | None = None):
        """Uniform floats in [0, 1) built from the top 53 bits of each output."""
        n = 1 if size is None else int(np.prod(size))
        x = (self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        if size is None:
            return float(x[0])
        return x.reshape(size)

    def uniform(self, low: float, high: float, size=None):
        u = self.random(size)
        return low + (high - low) * u

    def normal(self, size=None):
        """Standard normals via Box-Muller (two uniforms per pair)."""
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self.random(m)  # (0, 1]
        u2 = self.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        if size is None:
            return float(z[0])
        return z.reshape(size)

    def integer(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def integers(self, n: int, size: int | tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(size))
        return np.array([self.integer(n) for _ in range(count)], dtype=np.int64).reshape(size)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.integer(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> np.ndarray:
        idx = list(range(n))
        self.shuffle(idx)
        return np.array(idx, dtype=np.int64)

    def sample(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)`` via a partial shuffle."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot draw {k} of {n}")
        idx = list(range(n))
        for i in range(k):
            j = i + self.integer(n - i)
            idx[i], idx[j] = idx[j], idx[i]
        return np.array(idx[:k], dtype=np.int64)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream; the parent is not advanced."""
        return Rng(_mix_int(self.seed ^ _mix_int(key + 0x632BE59BD9B4E019)))
