"""Plane trees, Lukasiewicz coding, and Galton-Watson style samplers.

A plane tree is stored as its depth-first sequence of child counts
``c_0, ..., c_{n-1}``; the partial sums of ``c_i - 1`` form the Lukasiewicz
walk, which stays >= 0 before time n and ends at -1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterator

import numba as nb
import numpy as np

from . import rng as rng_mod
from .distributions import IntegerLaw, OffspringDist, adjoint, lukasiewicz_step, split_table
from .rng import Stream, as_stream, next_double, sample_cdf


class InvalidTree(ValueError):
    pass


class UnreachableSize(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PlanarTree:
    child_counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.child_counts, dtype=np.int64)
        if c.ndim != 1 or c.size == 0:
            raise InvalidTree("a tree has at least one vertex")
        if np.any(c < 0):
            raise InvalidTree("child counts must be nonnegative")
        walk = np.concatenate([[0], np.cumsum(c - 1)])
        if walk[-1] != -1 or np.any(walk[:-1] < 0):
            raise InvalidTree("child counts do not code a single tree")
        c.setflags(write=False)
        object.__setattr__(self, "child_counts", c)

    @property
    def n(self) -> int:
        return int(self.child_counts.size)

    def __len__(self) -> int:
        return self.n

    def __eq__(self, other) -> bool:
        return isinstance(other, PlanarTree) and np.array_equal(self.child_counts, other.child_counts)

    def __hash__(self) -> int:
        return hash(self.child_counts.tobytes())

    def __repr__(self) -> str:
        body = ",".join(map(str, self.child_counts[:12].tolist()))
        return f"PlanarTree(n={self.n}, [{body}{',...' if self.n > 12 else ''}])"

    @cached_property
    def parents(self) -> np.ndarray:
        return _parents(self.child_counts)

    @cached_property
    def depths(self) -> np.ndarray:
        return _depths(self.parents)

    @property
    def height(self) -> int:
        return int(self.depths.max())

    def lukasiewicz(self) -> np.ndarray:
        return encode(self)

    def to_text(self, labels: str | None = None) -> str:
        body = f"{self.n};" + ",".join(map(str, self.child_counts.tolist()))
        return body + (f";{labels}" if labels else "")

    @classmethod
    def from_text(cls, text: str) -> "PlanarTree":
        return parse_tree_text(text)[0]

    @classmethod
    def from_parents(cls, parents) -> "PlanarTree":
        """Rebuild from a depth-first parent array (parents[0] = -1)."""
        parents = np.asarray(parents, dtype=np.int64)
        counts = np.bincount(parents[1:], minlength=parents.size) if parents.size > 1 else np.zeros(1, np.int64)
        t = cls(counts)
        if not np.array_equal(t.parents, parents):
            raise InvalidTree("parent array is not in depth-first order")
        return t

    def mirror(self) -> "PlanarTree":
        """The tree with every sibling order reversed."""
        perm = reversed_dfs(self)
        return PlanarTree(self.child_counts[perm])


@nb.njit(cache=True)
def _parents(c):
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


@nb.njit(cache=True)
def _depths(par):
    n = par.shape[0]
    dep = np.zeros(n, dtype=np.int64)
    for v in range(1, n):
        dep[v] = dep[par[v]] + 1
    return dep


def encode(t: PlanarTree) -> np.ndarray:
    """Lukasiewicz walk (length n + 1, ending at -1)."""
    return np.concatenate([[0], np.cumsum(t.child_counts - 1)])


def decode(walk) -> PlanarTree:
    w = np.asarray(walk, dtype=np.int64)
    if w.size < 2 or w[0] != 0:
        raise InvalidTree("a Lukasiewicz walk starts at 0 and has at least one step")
    return PlanarTree(np.diff(w) + 1)


@dataclass(frozen=True, eq=False)
class Truncated:
    """Sampler stopped after ``consumed`` vertices; ``partial`` holds the
    child counts generated so far (a valid walk prefix, not a tree)."""

    partial: np.ndarray
    consumed: int

    def to_text(self) -> str:
        return f"truncated:{self.consumed};" + ",".join(map(str, self.partial.tolist()))


def parse_tree_text(text: str) -> tuple[PlanarTree, str | None]:
    parts = text.strip().split(";")
    if len(parts) < 2:
        raise InvalidTree("expected 'n;c0,c1,...'")
    n = int(parts[0])
    counts = np.array([int(a) for a in parts[1].split(",") if a != ""], dtype=np.int64)
    if counts.size != n:
        raise InvalidTree(f"header says {n} vertices, body has {counts.size}")
    labels = parts[2] if len(parts) > 2 and parts[2] else None
    if labels is not None and (len(labels) != n or set(labels) - {"X", "Y"}):
        raise InvalidTree("labels must be one X/Y character per vertex")
    return PlanarTree(counts), labels


# ------------------------------------------------------------ GW sampling


@nb.njit(cache=True)
def _gw_counts(state, root_cdf, cdf, max_vertices):
    """Depth-first GW sample; returns (counts, complete)."""
    cap = 64
    out = np.empty(cap, dtype=np.int64)
    pending = 1
    n = 0
    while pending > 0:
        if n >= max_vertices:
            return out[:n], False
        c = sample_cdf(state, root_cdf if n == 0 else cdf)
        if n == cap:
            cap *= 2
            new = np.empty(cap, dtype=np.int64)
            new[:n] = out[:n]
            out = new
        out[n] = c
        n += 1
        pending += c - 1
    return out[:n], True


@nb.njit(cache=True)
def gw_size(state, root_cdf, cdf, max_vertices):
    """Total size of a GW tree, or -1 once it exceeds ``max_vertices``."""
    pending = 1
    n = 0
    while pending > 0:
        if n >= max_vertices:
            return -1
        c = sample_cdf(state, root_cdf if n == 0 else cdf)
        n += 1
        pending += c - 1
    return n


@nb.njit(cache=True)
def _gw_sizes(keys, root_cdf, cdf, max_vertices):
    out = np.empty(keys.shape[0], dtype=np.int64)
    state = np.zeros(1, dtype=np.uint64)
    for i in range(keys.shape[0]):
        state[0] = keys[i]
        out[i] = gw_size(state, root_cdf, cdf, max_vertices)
    return out


def sample_gw(mu: OffspringDist, rng=None, max_vertices: int = 10**6) -> PlanarTree | Truncated:
    """Unconditioned critical GW tree in depth-first order."""
    if max_vertices < 1:
        raise ValueError("max_vertices must be >= 1")
    s = as_stream(rng)
    counts, done = _gw_counts(s.state, mu.cdf, mu.cdf, max_vertices)
    return PlanarTree(counts) if done else Truncated(counts, int(counts.size))


def sample_adjoint(mu: OffspringDist, rng=None, max_vertices: int = 10**6) -> PlanarTree | Truncated:
    """Adjoint tree: root offspring ~ tail-sum law, every other vertex ~ mu."""
    if max_vertices < 1:
        raise ValueError("max_vertices must be >= 1")
    s = as_stream(rng)
    counts, done = _gw_counts(s.state, adjoint(mu).cdf, mu.cdf, max_vertices)
    return PlanarTree(counts) if done else Truncated(counts, int(counts.size))


def gw_sizes(mu: OffspringDist, samples: int, seed: int, max_vertices: int = 10**6,
             adjoint_root: bool = False, label: str = "gw-sizes") -> np.ndarray:
    """Sizes of independent GW (or adjoint) trees; -1 marks truncation."""
    keys = rng_mod.stream_keys(seed, label, samples)
    root = adjoint(mu).cdf if adjoint_root else mu.cdf
    return _gw_sizes(keys, np.asarray(root), np.asarray(mu.cdf), max_vertices)


# ------------------------------------------------- size-conditioned trees


def size_reachable(mu: OffspringDist, n: int) -> tuple[bool, int]:
    """Whether P(#T = n) > 0, and the period of the Lukasiewicz walk."""
    step = lukasiewicz_step(mu)
    h = step.period
    lo = n * int(step.support[step.probs > 0].min())
    hi = n * int(step.support[step.probs > 0].max())
    first = int(step.support[step.probs > 0][0])
    ok = lo <= -1 <= hi and (-1 - n * first) % h == 0
    return ok, h


@nb.njit(cache=True)
def _multinomial(state, n, probs):
    """Multinomial(n, probs) by sequential binomials (inverse-CDF per draw for small n)."""
    k = probs.shape[0]
    out = np.zeros(k, dtype=np.int64)
    rem = n
    mass = 1.0
    for i in range(k - 1):
        if rem == 0:
            break
        p = probs[i] / mass if mass > 0 else 0.0
        if p >= 1.0:
            out[i] = rem
            rem = 0
            break
        x = _binomial(state, rem, p)
        out[i] = x
        rem -= x
        mass -= probs[i]
    out[k - 1] += rem
    return out


@nb.njit(cache=True)
def _binomial(state, n, p):
    if p <= 0.0:
        return 0
    if n < 64:
        x = 0
        for _ in range(n):
            if next_double(state) < p:
                x += 1
        return x
    # BTPE is overkill here; use inversion on the exact pmf around the mode
    q = 1.0 - p
    mode = int((n + 1) * p)
    if mode > n:
        mode = n
    logpm = (math.lgamma(n + 1) - math.lgamma(mode + 1) - math.lgamma(n - mode + 1)
             + mode * math.log(p) + (n - mode) * math.log(q))
    pm = math.exp(logpm)
    u = next_double(state)
    # search outward from the mode, alternating sides
    lo = mode
    hi = mode
    plo = pm
    phi = pm
    acc = pm
    if u < acc:
        return mode
    ratio = p / q
    while True:
        if hi < n:
            phi = phi * (n - hi) / (hi + 1) * ratio
            hi += 1
            acc += phi
            if u < acc:
                return hi
        if lo > 0:
            plo = plo * lo / (n - lo + 1) / ratio
            lo -= 1
            acc += plo
            if u < acc:
                return lo
        if hi >= n and lo <= 0:
            return mode


@nb.njit(cache=True)
def _vervaat(c):
    """Rotate a bridge (sum of c_i - 1 equal to -1) at its first minimum."""
    n = c.shape[0]
    s = 0
    best = 1
    arg = 0
    for i in range(n):
        s += c[i] - 1
        if s < best:
            best = s
            arg = i + 1
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        out[i] = c[(arg + i) % n]
    return out


@nb.njit(cache=True)
def _bridge_rejection(state, cdf, n, max_tries):
    c = np.empty(n, dtype=np.int64)
    for _ in range(max_tries):
        s = 0
        for i in range(n):
            c[i] = sample_cdf(state, cdf)
            s += c[i]
        if s == n - 1:
            return c, True
    return c, False


@nb.njit(cache=True)
def _bridge_multinomial(state, probs, n, max_tries):
    k = probs.shape[0]
    for _ in range(max_tries):
        cnt = _multinomial(state, n, probs)
        s = 0
        for v in range(k):
            s += v * cnt[v]
        if s == n - 1:
            c = np.empty(n, dtype=np.int64)
            pos = 0
            for v in range(k):
                for _j in range(cnt[v]):
                    c[pos] = v
                    pos += 1
            # uniform shuffle of the multiset
            for i in range(n - 1, 0, -1):
                j = int(next_double(state) * (i + 1))
                if j > i:
                    j = i
                t = c[i]
                c[i] = c[j]
                c[j] = t
            return c, True
    return np.empty(0, dtype=np.int64), False


REJECTION_LIMIT = 100


def sample_gw_conditioned(mu: OffspringDist, n: int, rng=None, method: str = "auto") -> PlanarTree:
    """Exact sample of the GW tree conditioned on having ``n`` vertices.

    A bridge of n i.i.d. child counts summing to n - 1 is drawn (rejection
    from i.i.d. draws, or rejection on the multinomial count vector followed
    by a uniform shuffle) and rotated at its first minimum (cycle lemma).
    """
    if n < 1:
        raise ValueError("size must be >= 1")
    ok, period = size_reachable(mu, n)
    if not ok:
        raise UnreachableSize(f"size {n} unreachable (period {period})")
    if n == 1:
        return PlanarTree(np.zeros(1, dtype=np.int64))
    s = as_stream(rng)
    if method == "auto":
        method = "rejection" if n <= REJECTION_LIMIT else "multinomial"
    tries = 1_000_000
    if method == "rejection":
        c, found = _bridge_rejection(s.state, mu.cdf, n, tries)
    elif method == "multinomial":
        c, found = _bridge_multinomial(s.state, np.asarray(mu.probs), n, tries)
    else:
        raise ValueError(f"unknown bridge method {method!r}")
    if not found:  # pragma: no cover - probability ~ exp(-tries / (sigma sqrt(n)))
        raise RuntimeError("bridge sampler exhausted its retries")
    return PlanarTree(_vervaat(c))


# ---------------------------------------------------------- exact tables


def walk_distribution(step: IntegerLaw, steps: int) -> tuple[np.ndarray, int]:
    """Exact law of Y_steps by repeated convolution; returns (probs, offset)."""
    probs = np.array([1.0])
    offset = 0
    for _ in range(steps):
        probs = np.convolve(probs, step.probs)
        offset += step.offset
    return probs, offset


def walk_pmf(step: IntegerLaw, steps: int, value: int) -> float:
    probs, off = walk_distribution(step, steps)
    i = value - off
    return float(probs[i]) if 0 <= i < probs.size else 0.0


def size_pmf(mu: OffspringDist, n: int) -> float:
    """P(#T = n) = P(Y_n = -1) / n."""
    return walk_pmf(lukasiewicz_step(mu), n, -1) / n


class PeriodicityError(ZeroDivisionError):
    pass


def phi_weight(mu: OffspringDist, m: int, k: int, ell: int) -> float:
    """m P(Y_{m-k} = -(ell + 1)) / ((m - k) P(Y_m = -1)), by exact convolution."""
    if not 0 <= k < m:
        raise ValueError("need 0 <= k < m")
    step = lukasiewicz_step(mu)
    den = walk_pmf(step, m, -1)
    if den == 0.0:
        raise PeriodicityError(
            f"P(Y_{m} = -1) = 0: size {m} is unreachable (walk period {step.period})"
        )
    num = walk_pmf(step, m - k, -(ell + 1))
    return m * num / ((m - k) * den)


def enumerate_trees(mu: OffspringDist, n: int) -> Iterator[tuple[tuple[int, ...], float]]:
    """All plane trees with n vertices whose counts have positive mu-mass,
    with their unconditioned probabilities prod mu(c_i)."""
    support = [k for k in range(mu.probs.size) if mu.probs[k] > 0]

    def rec(prefix, walk, prob):
        i = len(prefix)
        if i == n:
            if walk == -1:
                yield tuple(prefix), prob
            return
        for c in support:
            w = walk + c - 1
            if i < n - 1 and w < 0:
                continue
            if w - (n - i - 1) > -1:  # cannot come back down to -1 in time
                continue
            prefix.append(c)
            yield from rec(prefix, w, prob * mu.probs[c])
            prefix.pop()

    yield from rec([], 0, 1.0)


# --------------------------------------------------------- reversed order


def reversed_dfs(t: PlanarTree) -> np.ndarray:
    """perm[i] = depth-first index of the i-th vertex visited children right-to-left."""
    return _reversed_dfs(t.child_counts)


@nb.njit(cache=True)
def _reversed_dfs(c):
    n = c.shape[0]
    par = _parents(c)
    # children lists in forward order via CSR
    start = np.zeros(n + 1, dtype=np.int64)
    for v in range(n):
        start[v + 1] = start[v] + c[v]
    kids = np.empty(max(n - 1, 1), dtype=np.int64)
    fill = start[:-1].copy()
    for v in range(1, n):
        p = par[v]
        kids[fill[p]] = v
        fill[p] += 1
    out = np.empty(n, dtype=np.int64)
    stack = np.empty(n, dtype=np.int64)
    top = 0
    stack[0] = 0
    cnt = 0
    while top >= 0:
        v = stack[top]
        top -= 1
        out[cnt] = v
        cnt += 1
        # push forward order so the last child pops first
        for j in range(start[v], start[v + 1]):
            top += 1
            stack[top] = kids[j]
    return out


# ------------------------------------------------- infinite-spine trees


@dataclass
class SpinePrefix:
    """Depth-first prefix of a tree with an infinite spine.

    ``kind == "hat_minus"``: the reorganised non-positive part of the
    invariant tree.  The root carries no bush; every later spine vertex n
    draws a split (i, j) with probability mu(i + j + 1), grafts i GW bushes,
    and its next spine vertex is visited after those bushes.

    ``kind == "size_biased"``: the same, except the root also draws a split
    (the size-biased / Kesten tree read in depth-first order).
    """

    parent: np.ndarray  # parent index in the prefix (-1 for the root)
    spine: np.ndarray  # bool per vertex (the X labels)
    forest_counts: np.ndarray  # children in the bush forest (spine edges removed)
    full_counts: np.ndarray  # all children incl. spine child and right children
    splits: np.ndarray  # (spine_len, 2) left/right split per realised spine vertex
    kind: str = "hat_minus"

    @property
    def n(self) -> int:
        return int(self.parent.size)

    @property
    def labels(self) -> str:
        return "".join("X" if s else "Y" for s in self.spine)

    @property
    def spine_len(self) -> int:
        return int(self.spine.sum())

    def forest_walk(self) -> np.ndarray:
        """Lukasiewicz walk of the bush forest: L_0 = 0, L_{i+1} - L_i = forest_counts[i] - 1."""
        return np.concatenate([[0], np.cumsum(self.forest_counts - 1)])

    def full_walk(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.full_counts - 1)])

    def to_text(self) -> str:
        return f"{self.n};" + ",".join(map(str, self.parent.tolist())) + ";" + self.labels


def sample_hat_t_minus(mu: OffspringDist, m: int, rng=None) -> SpinePrefix:
    """First m + 1 vertices of the reorganised left part of the invariant tree."""
    if m < 0:
        raise ValueError("prefix length must be >= 0")
    return _spine_prefix(mu, m + 1, as_stream(rng), root_split=False)


def sample_size_biased_prefix(mu: OffspringDist, m: int, rng=None) -> SpinePrefix:
    """First m + 1 vertices (depth-first) of the size-biased GW tree."""
    return _spine_prefix(mu, m + 1, as_stream(rng), root_split=True)


def _spine_prefix(mu: OffspringDist, size: int, s: Stream, root_split: bool) -> SpinePrefix:
    left, right, prob = split_table(mu)
    split_cdf = np.cumsum(prob)
    split_cdf[-1] = 1.0 + 1e-15
    par, spine, fc, full, sp = _spine_prefix_kernel(
        s.state, size, np.asarray(mu.cdf), split_cdf, left.astype(np.int64),
        right.astype(np.int64), root_split,
    )
    return SpinePrefix(par, spine, fc, full, sp, "size_biased" if root_split else "hat_minus")


@nb.njit(cache=True)
def _spine_prefix_kernel(state, size, cdf, split_cdf, left, right, root_split):
    par = np.full(size, -1, dtype=np.int64)
    spine = np.zeros(size, dtype=np.bool_)
    fc = np.zeros(size, dtype=np.int64)
    full = np.zeros(size, dtype=np.int64)
    splits = np.zeros((size, 2), dtype=np.int64)
    # pending bush vertices: (parent index) on a stack, processed depth-first
    stack = np.empty(size + 8, dtype=np.int64)
    n = 0
    nspine = 0
    last_spine = -1
    while n < size:
        # new spine vertex
        v = n
        spine[v] = True
        par[v] = last_spine
        if nspine == 0 and not root_split:
            i = 0
            j = 0
        else:
            r = sample_cdf(state, split_cdf)
            i = left[r]
            j = right[r]
        splits[nspine, 0] = i
        splits[nspine, 1] = j
        fc[v] = i
        full[v] = i + j + 1
        nspine += 1
        last_spine = v
        n += 1
        # depth-first traversal of the i bushes hanging off v
        top = -1
        for _ in range(i):
            top += 1
            stack[top] = v
        # stack holds parents of not-yet-visited children; pop order gives
        # depth-first order because each visited vertex pushes its own
        # children on top
        while top >= 0 and n < size:
            p = stack[top]
            top -= 1
            u = n
            par[u] = p
            c = sample_cdf(state, cdf)
            fc[u] = c
            full[u] = c
            n += 1
            for _ in range(c):
                top += 1
                if top >= stack.shape[0]:
                    new = np.empty(stack.shape[0] * 2, dtype=np.int64)
                    new[: stack.shape[0]] = stack
                    stack = new
                stack[top] = u
    return par, spine, fc, full, splits[:nspine]


def spine_count(mu: OffspringDist, n: int, samples: int, seed: int, label: str = "spine") -> np.ndarray:
    """#(spine vertices among the first n + 1 vertices of the hat-minus tree), per sample."""
    keys = rng_mod.stream_keys(seed, label, samples)
    return _spine_counts(keys, np.asarray(mu.cdf), np.asarray(adjoint(mu).cdf), n + 1)


@nb.njit(cache=True)
def _spine_counts(keys, cdf, adj_cdf, size):
    """The prefix is a root, then i.i.d. adjoint trees; count how many start
    within the first ``size`` vertices."""
    out = np.empty(keys.shape[0], dtype=np.int64)
    state = np.zeros(1, dtype=np.uint64)
    for t in range(keys.shape[0]):
        state[0] = keys[t]
        used = 1
        count = 1
        while used < size:
            count += 1
            # adjoint tree rooted at the new spine vertex
            need = size - used
            sz = gw_size(state, adj_cdf, cdf, need)
            if sz < 0:
                used = size
            else:
                used += sz
        out[t] = count
    return out


# --------------------------------------------------------------- T_plus


@dataclass
class TPlusPrefix:
    """Vertices T_+(0..n) of the invariant tree, with graph-distance queries.

    ``block[v]`` is the spine index s whose right-hand subtrees contain v
    (block 0 is the subtree of the root itself), ``depth[v]`` is the distance
    from v to that spine vertex and ``parent[v]`` the parent index (-1 when
    the parent is the spine vertex itself or v is the root).
    """

    block: np.ndarray
    depth: np.ndarray
    parent: np.ndarray

    @property
    def n(self) -> int:
        return int(self.block.size) - 1

    def dist(self, a: int, b: int) -> int:
        ba, bb = int(self.block[a]), int(self.block[b])
        da, db = int(self.depth[a]), int(self.depth[b])
        if ba != bb:
            return da + db + abs(ba - bb)
        # lowest common ancestor inside one block
        x, y = a, b
        while da > db:
            x = int(self.parent[x]); da -= 1
        while db > da:
            y = int(self.parent[y]); db -= 1
        while x != y:
            x, y = int(self.parent[x]), int(self.parent[y])
            da -= 1
            if x < 0 or y < 0:
                break
        common = da if x == y and x >= 0 else 0
        return int(self.depth[a]) + int(self.depth[b]) - 2 * common


def sample_t_plus(mu: OffspringDist, n: int, rng=None) -> TPlusPrefix:
    """First n + 1 vertices of the non-negative part of the invariant tree."""
    if n < 0:
        raise ValueError("n must be >= 0")
    s = as_stream(rng)
    left, right, prob = split_table(mu)
    split_cdf = np.cumsum(prob)
    split_cdf[-1] = 1.0 + 1e-15
    block, depth, parent = _t_plus_kernel(
        s.state, n + 1, np.asarray(mu.cdf), split_cdf, right.astype(np.int64)
    )
    return TPlusPrefix(block, depth, parent)


@nb.njit(cache=True)
def _t_plus_kernel(state, size, cdf, split_cdf, right):
    block = np.zeros(size, dtype=np.int64)
    depth = np.zeros(size, dtype=np.int64)
    parent = np.full(size, -1, dtype=np.int64)
    stack = np.empty(64, dtype=np.int64)
    n = 1  # vertex 0 is the root
    # root's own subtree is a GW tree: push the root's children
    top = -1
    c = sample_cdf(state, cdf)
    for _ in range(c):
        top += 1
        if top >= stack.shape[0]:
            new = np.empty(stack.shape[0] * 2, dtype=np.int64)
            new[: stack.shape[0]] = stack
            stack = new
        stack[top] = 0
    s = 0
    while n < size:
        if top < 0:
            # move up the spine: right children of the next spine vertex
            s += 1
            r = sample_cdf(state, split_cdf)
            for _ in range(right[r]):
                top += 1
                if top >= stack.shape[0]:
                    new = np.empty(stack.shape[0] * 2, dtype=np.int64)
                    new[: stack.shape[0]] = stack
                    stack = new
                stack[top] = -1  # parent is the spine vertex s
            continue
        p = stack[top]
        top -= 1
        u = n
        block[u] = s
        if p < 0:
            parent[u] = -1
            depth[u] = 1
        else:
            parent[u] = p
            depth[u] = depth[p] + 1
        n += 1
        c = sample_cdf(state, cdf)
        for _ in range(c):
            top += 1
            if top >= stack.shape[0]:
                new = np.empty(stack.shape[0] * 2, dtype=np.int64)
                new[: stack.shape[0]] = stack
                stack = new
            stack[top] = u
    return block, depth, parent


# ---------------------------------------------------------- height tail


def height_tail(mu: OffspringDist, js, samples: int, seed: int, label: str = "height") -> np.ndarray:
    """Empirical P(height >= j) for each j, from generation-wise GW processes."""
    js = np.asarray(sorted(js), dtype=np.int64)
    keys = rng_mod.stream_keys(seed, label, samples)
    heights = _heights(keys, np.asarray(mu.probs), int(js.max()))
    return np.array([(heights >= j).mean() for j in js])


@nb.njit(cache=True)
def _heights(keys, probs, jmax):
    out = np.empty(keys.shape[0], dtype=np.int64)
    state = np.zeros(1, dtype=np.uint64)
    k = probs.shape[0]
    for t in range(keys.shape[0]):
        state[0] = keys[t]
        z = 1
        h = 0
        while z > 0 and h < jmax:
            cnt = _multinomial(state, z, probs)
            nz = 0
            for v in range(k):
                nz += v * cnt[v]
            z = nz
            if z > 0:
                h += 1
        out[t] = h
    return out


# ------------------------------------------- absolute continuity by enumeration


def conditioned_prefix_law(mu: OffspringDist, m: int, k: int) -> dict[tuple[int, ...], float]:
    """Law of the first k child counts (the shape of vertices 0..k) of the
    tree conditioned on m vertices, by enumerating all such trees."""
    total = size_pmf(mu, m)
    if total == 0.0:
        raise PeriodicityError(f"size {m} unreachable (period {lukasiewicz_step(mu).period})")
    out: dict[tuple[int, ...], float] = {}
    for counts, p in enumerate_trees(mu, m):
        key = counts[:k]
        out[key] = out.get(key, 0.0) + p / total
    return out


def weighted_spine_prefix_law(mu: OffspringDist, m: int, k: int, root_split: bool = True,
                              walk: str = "full") -> dict[tuple[int, ...], float]:
    """sum over spine-prefix realisations of P(realisation) * Phi_{m,k}(W_k),
    keyed by the first k full child counts.

    The realisations are enumerated the way the spine samplers build them: a
    spine vertex draws a split (i, j) with probability mu(i + j + 1), its i
    bush children are explored depth-first before the next spine vertex, and
    bush vertices draw mu.  ``walk`` selects W: "full" counts every child,
    "forest" is the bush-forest walk L.
    """
    step = lukasiewicz_step(mu)
    den = walk_pmf(step, m, -1)
    if den == 0.0:
        raise PeriodicityError(f"size {m} unreachable (period {step.period})")
    ydist, yoff = walk_distribution(step, m - k)

    def phi(ell):
        i = -(ell + 1) - yoff
        num = ydist[i] if 0 <= i < ydist.size else 0.0
        return m * num / ((m - k) * den)

    probs = mu.probs
    cmax = m  # larger counts give W_k + 1 > m - k and weight 0
    out: dict[tuple[int, ...], float] = {}

    def rec(counts, stack, wfull, wforest, prob, first):
        j = len(counts)
        if j == k:
            w = wfull if walk == "full" else wforest
            val = prob * phi(w)
            if val:
                key = tuple(counts)
                out[key] = out.get(key, 0.0) + val
            return
        if wfull + 1 > m - j + 1:
            return
        kind = stack[-1]
        rest = stack[:-1]
        if kind == "spine":
            if first and not root_split:
                rec(counts + [1], rest + ["spine"], wfull, wforest - 1, prob, False)
                return
            for c in range(1, min(cmax, probs.size - 1) + 1):
                pc = probs[c]
                if pc == 0.0:
                    continue
                for i in range(c):
                    # j = c - 1 - i right children are never visited
                    rec(counts + [c], rest + ["spine"] + ["bush"] * i,
                        wfull + c - 1, wforest + i - 1, prob * pc, False)
        else:
            for c in range(0, min(cmax, probs.size - 1) + 1):
                pc = probs[c]
                if pc == 0.0:
                    continue
                rec(counts + [c], rest + ["bush"] * c, wfull + c - 1, wforest + c - 1, prob * pc, False)

    rec([], ["spine"], 0, 0, 1.0, True)
    return out


def absolute_continuity_gap(mu: OffspringDist, m: int, k: int, root_split: bool = True,
                            walk: str = "full") -> float:
    """max over shapes of |E[1{shape} | #T = m] - E[1{shape} Phi_{m,k}(W_k)]|."""
    lhs = conditioned_prefix_law(mu, m, k)
    rhs = weighted_spine_prefix_law(mu, m, k, root_split=root_split, walk=walk)
    keys = set(lhs) | set(rhs)
    return max(abs(lhs.get(a, 0.0) - rhs.get(a, 0.0)) for a in keys)
