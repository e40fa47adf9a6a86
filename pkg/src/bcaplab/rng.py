"""Counter-based random streams.

Every Monte Carlo trial owns a 64-bit stream key derived from
``(master_seed, experiment_id, trial_index)``.  Inside a stream the i-th
draw is ``mix64(key + (i + 1) * GAMMA)`` (SplitMix64), so a trial's output
depends only on its key and never on which worker ran it or in what order.
"""

from __future__ import annotations

import hashlib

import numba as nb
import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


@nb.njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True, inline="always")
def next_u64(state):
    """Advance ``state`` (a length-1 uint64 array) and return the next output."""
    state[0] += GAMMA
    return mix64(state[0])


@nb.njit(cache=True, inline="always")
def next_double(state):
    return np.float64(next_u64(state) >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@nb.njit(cache=True)
def sample_cdf(state, cdf):
    """Inverse-CDF draw: smallest index i with u < cdf[i]."""
    u = next_double(state)
    lo = 0
    hi = cdf.shape[0] - 1
    while lo < hi:
        mid = (lo + hi) >> 1
        if u < cdf[mid]:
            hi = mid
        else:
            lo = mid + 1
    return lo


@nb.njit(cache=True, inline="always")
def alias_draw(state, prob, alias):
    """Walker alias draw from one 64-bit output: the high half picks a
    column, the low half is the threshold uniform (32-bit resolution)."""
    z = next_u64(state)
    i = np.int64(((z >> np.uint64(32)) * np.uint64(prob.shape[0])) >> np.uint64(32))
    u = np.float64(z & np.uint64(0xFFFFFFFF)) * (1.0 / 4294967296.0)
    if u < prob[i]:
        return i
    return alias[i]


def alias_table(probs) -> tuple[np.ndarray, np.ndarray]:
    """Vose's alias tables (threshold, alias) for a finite law."""
    p = np.asarray(probs, dtype=np.float64)
    p = p / p.sum()
    n = p.size
    q = p * n
    alias = np.arange(n, dtype=np.int64)
    small = [i for i in range(n) if q[i] < 1.0]
    large = [i for i in range(n) if q[i] >= 1.0]
    while small and large:
        s = small.pop()
        g = large.pop()
        alias[s] = g
        q[g] -= 1.0 - q[s]
        (small if q[g] < 1.0 else large).append(g)
    for i in small + large:
        q[i] = 1.0
    return q, alias


def _mix64_py(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def label_hash(label: str) -> int:
    """Stable 64-bit hash of a text label (independent of PYTHONHASHSEED)."""
    return int.from_bytes(hashlib.blake2b(label.encode(), digest_size=8).digest(), "little")


def stream_key(seed: int, label: str | int, index: int = 0) -> int:
    """Derive the key of stream ``index`` under ``(seed, label)``."""
    lab = label if isinstance(label, int) else label_hash(label)
    k = _mix64_py(int(seed) & _MASK64)
    k = _mix64_py(k ^ (lab & _MASK64))
    return _mix64_py(k ^ ((int(index) * 0x9E3779B97F4A7C15) & _MASK64))


def stream_keys(seed: int, label: str | int, count: int, start: int = 0) -> np.ndarray:
    """Keys of streams ``start .. start + count - 1`` (same values as ``stream_key``)."""
    lab = label if isinstance(label, int) else label_hash(label)
    k = _mix64_py(_mix64_py(int(seed) & _MASK64) ^ (lab & _MASK64))
    return _index_keys(np.uint64(k), np.int64(start), np.int64(count))


@nb.njit(cache=True)
def _index_keys(k, start, count):
    out = np.empty(count, dtype=np.uint64)
    for i in range(count):
        out[i] = mix64(k ^ (np.uint64(start + i) * GAMMA))
    return out


class Stream:
    """Python-side view of one counter-based stream.

    Used by the pure-Python samplers (trees, small experiments).  It exposes
    just what those samplers need; heavy loops use the numba kernels with the
    same key so both paths are reproducible.
    """

    def __init__(self, key: int):
        self.key = int(key) & _MASK64
        self.state = np.array([self.key], dtype=np.uint64)

    @classmethod
    def from_seed(cls, seed: int, label: str | int = "default", index: int = 0) -> "Stream":
        return cls(stream_key(seed, label, index))

    def random(self) -> float:
        return float(next_double(self.state))

    def uniforms(self, n: int) -> np.ndarray:
        return _uniforms(self.state, n)

    def integers(self, high: int) -> int:
        """Uniform integer in ``[0, high)``."""
        return min(int(self.random() * high), high - 1)

    def choice_cdf(self, cdf: np.ndarray) -> int:
        return int(sample_cdf(self.state, cdf))

    def spawn(self, index: int) -> "Stream":
        return Stream(_mix64_py(self.key ^ ((index + 1) * 0xD1B54A32D192ED03)))

    def numpy(self) -> np.random.Generator:
        """A numpy Generator seeded from this stream (for vectorised draws)."""
        return np.random.Generator(np.random.Philox(key=self.key))


@nb.njit(cache=True)
def _uniforms(state, n):
    out = np.empty(n)
    for i in range(n):
        out[i] = next_double(state)
    return out


def as_stream(rng) -> Stream:
    """Accept a Stream, an int seed, or None."""
    if isinstance(rng, Stream):
        return rng
    if rng is None:
        return Stream.from_seed(0)
    if isinstance(rng, (int, np.integer)):
        return Stream.from_seed(int(rng))
    raise TypeError(f"cannot build a random stream from {type(rng).__name__}")
