"""Tree-indexed random walks on Z^d and their ranges."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numba as nb
import numpy as np
from scipy import stats

from . import rng as rng_mod
from .distributions import OffspringDist, StepDist
from .lattice import LatticeSet
from .rng import as_stream, sample_cdf
from .trees import (
    PlanarTree, SpinePrefix, TPlusPrefix, Truncated,
    parse_tree_text, sample_t_plus,
)


@nb.njit(cache=True)
def _realize(state, parent, x, steps, step_cdf):
    n = parent.shape[0]
    d = steps.shape[1]
    pos = np.empty((n, d), dtype=np.int32)
    for k in range(d):
        pos[0, k] = x[k]
    for v in range(1, n):
        s = sample_cdf(state, step_cdf)
        p = parent[v]
        for k in range(d):
            pos[v, k] = pos[p, k] + steps[s, k]
    return pos


@dataclass(frozen=True, eq=False)
class TreeWalk:
    """Positions of a branching random walk indexed by a (possibly partial) tree.

    ``parent`` is the depth-first parent array of the realised vertices;
    ``truncated`` is set when the tree came from a sampler that hit its budget.
    """

    tree: object
    parent: np.ndarray
    positions: np.ndarray
    origin: np.ndarray
    theta: StepDist
    truncated: bool = False

    @property
    def n(self) -> int:
        return int(self.positions.shape[0])

    @property
    def d(self) -> int:
        return int(self.positions.shape[1])

    def range(self) -> LatticeSet:
        return LatticeSet(self.positions, self.d)

    def increments(self) -> np.ndarray:
        """Edge increments V(v) - V(parent(v)) for every non-root vertex."""
        return self.positions[1:] - self.positions[self.parent[1:]]

    def to_bytes(self) -> bytes:
        """Tree text, then the little-endian int32 position array."""
        if isinstance(self.tree, PlanarTree):
            head = self.tree.to_text().encode()
        else:
            head = ("parents:" + ",".join(map(str, self.parent.tolist()))).encode()
        return (struct.pack("<III", len(head), self.n, self.d) + head
                + self.positions.astype("<i4").tobytes())

    @classmethod
    def from_bytes(cls, data: bytes, theta: StepDist) -> "TreeWalk":
        hl, n, d = struct.unpack_from("<III", data, 0)
        head = data[12:12 + hl].decode()
        pos = np.frombuffer(data, dtype="<i4", count=n * d, offset=12 + hl).reshape(n, d).astype(np.int32)
        if head.startswith("parents:"):
            parent = np.array([int(a) for a in head[8:].split(",")], dtype=np.int64)
            tree = None
        else:
            tree, _ = parse_tree_text(head)
            parent = tree.parents
        return cls(tree, parent, pos, pos[0].copy(), theta)


def realize(tree, theta: StepDist, x=None, rng=None) -> TreeWalk:
    """Assign i.i.d. theta increments to the edges of ``tree``.

    ``tree`` may be a PlanarTree, a Truncated marker (partial prefix), a
    SpinePrefix or anything exposing a depth-first ``parent`` array.
    """
    s = as_stream(rng)
    truncated = False
    if isinstance(tree, PlanarTree):
        parent = tree.parents
    elif isinstance(tree, Truncated):
        parent = _parents_partial(tree.partial)
        truncated = True
    elif isinstance(tree, SpinePrefix):
        parent = tree.parent
    else:
        parent = np.asarray(tree.parent, dtype=np.int64)
    x = np.zeros(theta.d, dtype=np.int64) if x is None else np.asarray(x, dtype=np.int64)
    if x.shape != (theta.d,):
        raise ValueError(f"origin must have {theta.d} coordinates")
    pos = _realize(s.state, parent, x, theta.steps.astype(np.int32), np.asarray(theta.cdf))
    return TreeWalk(tree, parent, pos, x, theta, truncated)


@nb.njit(cache=True)
def _parents_partial_kernel(c):
    n = c.shape[0]
    par = np.full(n, -1, dtype=np.int64)
    stack = np.empty(n + 1, dtype=np.int64)
    remaining = np.empty(n + 1, dtype=np.int64)
    top = -1
    for v in range(n):
        if top >= 0:
            par[v] = stack[top]
            remaining[top] -= 1
            if remaining[top] == 0:
                top -= 1
        if c[v] > 0:
            top += 1
            stack[top] = v
            remaining[top] = c[v]
    return par


def _parents_partial(counts: np.ndarray) -> np.ndarray:
    """Parents of the materialised vertices of a truncated depth-first prefix."""
    return _parents_partial_kernel(np.asarray(counts, dtype=np.int64))


def walk_range(walk: TreeWalk) -> LatticeSet:
    return walk.range()


# ------------------------------------------------------ spine decomposition


@dataclass(frozen=True)
class SpineDecomposition:
    spine_positions: np.ndarray  # V_X(0), V_X(1), ...
    bush_positions: np.ndarray  # V_Y(0) = root, then bush vertices in depth-first order

    @property
    def spine_range(self) -> LatticeSet:
        return LatticeSet(self.spine_positions, self.spine_positions.shape[1])

    @property
    def bush_range(self) -> LatticeSet:
        return LatticeSet(self.bush_positions, self.bush_positions.shape[1])


def spine_decompose(walk: TreeWalk) -> SpineDecomposition:
    prefix = walk.tree
    if not isinstance(prefix, SpinePrefix):
        raise TypeError("spine decomposition needs a walk over a spine prefix")
    spine = prefix.spine.copy()
    bush = ~spine
    bush[0] = True  # the root belongs to both
    return SpineDecomposition(walk.positions[spine], walk.positions[bush])


# ------------------------------------------------------- T_+ increments


def increment_stat(positions: np.ndarray, eta: float, n: int | None = None) -> tuple[float, np.ndarray]:
    """max over blocks k <= 1/eta of max_{i <= eta n} |V(k eta n + i) - V(k eta n)|.

    Returns the statistic and the per-block maxima.
    """
    if not 0 < eta <= 1:
        raise ValueError("eta must lie in (0, 1]")
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0] - 1 if n is None else int(n)
    width = max(1, int(eta * n))
    blocks = []
    for k in range(int(1 / eta) + 1):
        a = k * width
        if a > n:
            break
        b = min(n, a + width)
        seg = pos[a:b + 1] - pos[a]
        blocks.append(np.sqrt((seg * seg).sum(axis=1)).max())
    blocks = np.array(blocks)
    return float(blocks.max()), blocks


def realize_t_plus(prefix: TPlusPrefix, theta: StepDist, x=None, rng=None) -> np.ndarray:
    """Positions V_+(0..n) of a T_+ prefix.

    Vertices hanging off spine vertex s >= 1 are placed relative to the spine
    position, which is a theta-walk run upwards from the root.
    """
    s = as_stream(rng)
    d = theta.d
    steps = theta.steps.astype(np.int32)
    nblocks = int(prefix.block.max()) + 1
    x = np.zeros(d, dtype=np.int64) if x is None else np.asarray(x, dtype=np.int64)
    return _realize_t_plus(s.state, prefix.block, prefix.parent, x, steps, np.asarray(theta.cdf), nblocks)


@nb.njit(cache=True)
def _realize_t_plus(state, block, parent, x, steps, step_cdf, nblocks):
    d = steps.shape[1]
    spine = np.empty((nblocks, d), dtype=np.int64)
    for k in range(d):
        spine[0, k] = x[k]
    for b in range(1, nblocks):
        s = sample_cdf(state, step_cdf)
        for k in range(d):
            spine[b, k] = spine[b - 1, k] + steps[s, k]
    n = block.shape[0]
    pos = np.empty((n, d), dtype=np.int64)
    for k in range(d):
        pos[0, k] = x[k]
    for v in range(1, n):
        s = sample_cdf(state, step_cdf)
        p = parent[v]
        for k in range(d):
            base = spine[block[v], k] if p < 0 else pos[p, k]
            pos[v, k] = base + steps[s, k]
    return pos


def sample_v_infinity(mu: OffspringDist, theta: StepDist, i_max: int, shift: int, rng=None) -> np.ndarray:
    """Positions V_inf(0..shift + i_max) on the non-negative labels of the invariant tree."""
    s = as_stream(rng)
    prefix = sample_t_plus(mu, shift + i_max, s)
    return realize_t_plus(prefix, theta, None, s)


def translation_check(theta: StepDist, mu: OffspringDist, n: int, i_max: int, samples: int,
                      seed: int = 0, functional: str = "endpoint") -> tuple[float, float]:
    """Two-sample KS comparison of a functional of (V(n + i) - V(n))_{i <= i_max}
    against the same functional of (V(i) - V(0)).

    ``functional`` is "endpoint" (first coordinate of the window's last point)
    or "range" (number of distinct sites in the window).
    """
    if n < 0:
        raise ValueError("shift must be >= 0")
    a = np.empty(samples)
    b = np.empty(samples)
    for t in range(samples):
        # independent trees for the two samples so the KS test is two-sample
        pa = sample_v_infinity(mu, theta, i_max, n, rng_mod.Stream.from_seed(seed, "translation-a", t))
        pb = sample_v_infinity(mu, theta, i_max, 0, rng_mod.Stream.from_seed(seed, "translation-b", t))
        wa = pa[n:n + i_max + 1] - pa[n]
        wb = pb[: i_max + 1] - pb[0]
        a[t], b[t] = _functional(wa, functional), _functional(wb, functional)
    res = stats.ks_2samp(a, b)
    return float(res.statistic), float(res.pvalue)


def _functional(w: np.ndarray, name: str) -> float:
    if name == "endpoint":
        return float(w[-1, 0])
    if name == "range":
        return float(np.unique(w, axis=0).shape[0])
    raise ValueError(f"unknown functional {name!r}")
