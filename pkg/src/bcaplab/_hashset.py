"""Open-addressing hash set of Z^d points usable from numba kernels.

A table is a pair ``(keys, used)``: ``keys`` has shape (capacity, d) int32
and ``used`` is a uint8 flag array; capacity is a power of two.
"""

import numba as nb
import numpy as np

from .rng import mix64


@nb.njit(cache=True, inline="always")
def point_hash(p):
    h = np.uint64(0x243F6A8885A308D3)
    for a in p:
        h = mix64(h ^ np.uint64(np.int64(a) & 0xFFFFFFFF))
    return h


@nb.njit(cache=True)
def table_contains(keys, used, p):
    mask = np.uint64(keys.shape[0] - 1)
    i = point_hash(p) & mask
    d = keys.shape[1]
    while used[i]:
        same = True
        for k in range(d):
            if keys[i, k] != p[k]:
                same = False
                break
        if same:
            return True
        i = (i + np.uint64(1)) & mask
    return False


@nb.njit(cache=True)
def table_insert(keys, used, p):
    """Insert ``p``; return True if it was new.  Caller keeps load < 1/2."""
    mask = np.uint64(keys.shape[0] - 1)
    i = point_hash(p) & mask
    d = keys.shape[1]
    while used[i]:
        same = True
        for k in range(d):
            if keys[i, k] != p[k]:
                same = False
                break
        if same:
            return False
        i = (i + np.uint64(1)) & mask
    used[i] = 1
    for k in range(d):
        keys[i, k] = p[k]
    return True


def capacity_for(n: int) -> int:
    cap = 16
    while cap < 2 * n + 2:
        cap *= 2
    return cap


@nb.njit(cache=True)
def build_table(points, cap):
    keys = np.zeros((cap, points.shape[1]), dtype=np.int32)
    used = np.zeros(cap, dtype=np.uint8)
    for j in range(points.shape[0]):
        table_insert(keys, used, points[j])
    return keys, used


@nb.njit(cache=True)
def contains_many(keys, used, probes):
    out = np.zeros(probes.shape[0], dtype=np.bool_)
    for j in range(probes.shape[0]):
        out[j] = table_contains(keys, used, probes[j])
    return out


@nb.njit(cache=True)
def unique_rows(points):
    """Distinct rows of ``points`` in first-seen order."""
    n = points.shape[0]
    cap = 16
    while cap < 2 * n + 2:
        cap *= 2
    keys = np.zeros((cap, points.shape[1]), dtype=np.int32)
    used = np.zeros(cap, dtype=np.uint8)
    keep = np.zeros(n, dtype=np.bool_)
    for j in range(n):
        keep[j] = table_insert(keys, used, points[j])
    return points[keep]
