"""Finite subsets of Z^d, the covariance norm, and the lattice Green function."""

from __future__ import annotations

import io
import itertools
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property

import numba as nb
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import gamma as gamma_fn

from . import _hashset as hs
from .distributions import StepDist

DEFAULT_MAX_POINTS = 20_000_000


class LatticeSet:
    """Immutable finite set of points of Z^d.

    Points are kept sorted lexicographically; membership goes through an
    open-addressing hash table and distance queries through a bucket grid.
    """

    def __init__(self, points, d: int | None = None):
        pts = np.asarray(points, dtype=np.int64)
        if pts.ndim == 1:
            pts = pts.reshape(-1, d) if d else pts.reshape(1, -1)
        if d is None:
            d = pts.shape[1]
        if pts.size == 0:
            pts = np.zeros((0, d), dtype=np.int64)
        if np.abs(pts).max(initial=0) >= 2**31:
            raise OverflowError("coordinates must fit in 32-bit integers")
        pts = np.unique(pts.reshape(-1, d), axis=0).astype(np.int32)
        pts.setflags(write=False)
        self.points = pts
        self.d = int(d)
        self._buckets: dict[int, tuple] = {}

    def __len__(self) -> int:
        return self.points.shape[0]

    def __iter__(self):
        return (tuple(p) for p in self.points.tolist())

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, LatticeSet)
            and self.d == other.d
            and np.array_equal(self.points, other.points)
        )

    def __repr__(self) -> str:
        return f"LatticeSet(d={self.d}, n={len(self)})"

    @cached_property
    def table(self) -> tuple[np.ndarray, np.ndarray]:
        return hs.build_table(self.points, hs.capacity_for(len(self)))

    def __contains__(self, x) -> bool:
        keys, used = self.table
        return bool(hs.table_contains(keys, used, np.asarray(x, dtype=np.int32)))

    def contains_many(self, probes) -> np.ndarray:
        keys, used = self.table
        return hs.contains_many(keys, used, np.asarray(probes, dtype=np.int32).reshape(-1, self.d))

    def issubset(self, other: "LatticeSet") -> bool:
        return bool(np.all(other.contains_many(self.points)))

    def union(self, other: "LatticeSet") -> "LatticeSet":
        return LatticeSet(np.concatenate([self.points, other.points]), self.d)

    def translate(self, z) -> "LatticeSet":
        return LatticeSet(self.points.astype(np.int64) + np.asarray(z, dtype=np.int64), self.d)

    @cached_property
    def center(self) -> np.ndarray:
        """Midpoint of the bounding box (real coordinates)."""
        if len(self) == 0:
            return np.zeros(self.d)
        return (self.points.min(axis=0) + self.points.max(axis=0).astype(float)) / 2

    @cached_property
    def radius(self) -> float:
        """Largest Euclidean distance from ``center`` to a point."""
        if len(self) == 0:
            return 0.0
        return float(np.sqrt(((self.points - self.center) ** 2).sum(axis=1).max()))

    @cached_property
    def diameter(self) -> float:
        if len(self) <= 1:
            return 0.0
        if len(self) <= 3000:
            p = self.points.astype(float)
            return float(np.sqrt(_max_pair_sq(p)))
        # bounded by twice the enclosing radius; exact value not needed at scale
        return 2.0 * self.radius

    # -------------------------------------------------------------- buckets

    def _bucket(self, side: int):
        """Points grouped by cubic cells of the given side, behind a hash table."""
        if side not in self._buckets:
            cells = np.floor_divide(self.points, side).astype(np.int32)
            order = np.lexsort(cells.T[::-1])
            cs = cells[order]
            brk = np.nonzero(np.any(np.diff(cs, axis=0) != 0, axis=1))[0] + 1
            starts = np.concatenate([[0], brk, [len(cs)]]).astype(np.int64)
            uniq = cs[starts[:-1]]
            keys, used = hs.build_table(uniq, hs.capacity_for(len(uniq)))
            slot = _slot_lookup(keys, used, uniq)
            self._buckets[side] = (keys, used, slot, starts[:-1].copy(), starts[1:].copy(),
                                   self.points[order])
        return self._buckets[side]

    def min_dist(self, x, side: int | None = None) -> float:
        """Exact Euclidean distance from ``x`` to the set (expanding rings)."""
        if len(self) == 0:
            raise ValueError("distance to an empty set is undefined")
        x = np.asarray(x, dtype=np.int64)
        if x in self:
            return 0.0
        side = side or max(1, int(round(len(self) ** (-1.0 / self.d) * max(self.radius, 1.0))))
        return math.sqrt(_ring_min(x.astype(np.int32), side, *self._bucket(side)))

    # --------------------------------------------------------- serialization

    def to_bytes(self) -> bytes:
        head = struct.pack("<II", self.d, len(self))
        return head + self.points.astype("<i4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "LatticeSet":
        d, n = struct.unpack_from("<II", data, 0)
        pts = np.frombuffer(data, dtype="<i4", count=d * n, offset=8).reshape(n, d)
        return cls(pts, d)

    def to_csv(self) -> str:
        buf = io.StringIO()
        np.savetxt(buf, self.points, fmt="%d", delimiter=",")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, d: int | None = None) -> "LatticeSet":
        rows = [list(map(int, ln.split(","))) for ln in text.strip().splitlines() if ln.strip()]
        return cls(np.array(rows, dtype=np.int64).reshape(len(rows), -1) if rows else np.zeros((0, d or 1)), d)


@nb.njit(cache=True)
def _ring_min(x, side, keys, used, slot, start, end, pts):
    """Squared distance from x to pts, scanning cell rings outward from x's
    cell until the next ring cannot hold anything closer; falls back to a
    full scan once a ring has more cells than there are points."""
    d = x.shape[0]
    n = pts.shape[0]
    home = np.empty(d, dtype=np.int32)
    for k in range(d):
        home[k] = x[k] // side
    best = np.inf
    c = np.empty(d, dtype=np.int32)
    off = np.empty(d, dtype=np.int64)
    ring = 0
    while True:
        width = 2 * ring + 1
        if width ** d > 4 * n:
            for j in range(n):
                acc = 0.0
                for k in range(d):
                    t = np.float64(pts[j, k] - x[k])
                    acc += t * t
                if acc < best:
                    best = acc
            return best
        for k in range(d):
            off[k] = -ring
        while True:
            on_ring = False
            for k in range(d):
                if off[k] == ring or off[k] == -ring:
                    on_ring = True
                    break
            if on_ring:
                for k in range(d):
                    c[k] = home[k] + off[k]
                s = _find_slot(keys, used, c)
                if s >= 0:
                    g = slot[s]
                    for j in range(start[g], end[g]):
                        acc = 0.0
                        for k in range(d):
                            t = np.float64(pts[j, k] - x[k])
                            acc += t * t
                        if acc < best:
                            best = acc
            k = 0
            while k < d:
                off[k] += 1
                if off[k] <= ring:
                    break
                off[k] = -ring
                k += 1
            if k == d:
                break
        # points outside rings 0..ring are at least ring * side away
        if best <= (ring * side) ** 2:
            return best
        ring += 1


@nb.njit(cache=True)
def _max_pair_sq(p):
    best = 0.0
    n = p.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            s = 0.0
            for k in range(p.shape[1]):
                t = p[i, k] - p[j, k]
                s += t * t
            if s > best:
                best = s
    return best


def ball(d: int, r: float, center=None) -> LatticeSet:
    """Lattice points of the closed Euclidean ball {|x - center| <= r}."""
    offs = ball_offsets(d, r)
    if center is not None:
        offs = offs + np.asarray(center, dtype=np.int64)
    return LatticeSet(offs, d)


def open_ball(d: int, r: float) -> LatticeSet:
    """Lattice points of the open ball {|x| < r}."""
    offs = ball_offsets(d, r)
    keep = (offs.astype(float) ** 2).sum(axis=1) < r * r
    return LatticeSet(offs[keep], d)


def ball_offsets(d: int, r: float) -> np.ndarray:
    """All z in Z^d with |z| <= r, generated coordinate by coordinate."""
    r2 = r * r + 1e-9
    m = int(math.floor(r))
    pts = np.zeros((1, 0), dtype=np.int64)
    used = np.zeros(1)
    for _ in range(d):
        vals = np.arange(-m, m + 1)
        nu = used[:, None] + vals[None, :] ** 2
        keep = nu <= r2
        rows, cols = np.nonzero(keep)
        pts = np.concatenate([pts[rows], vals[cols, None]], axis=1)
        used = nu[rows, cols]
    return pts


def neighborhood(A: LatticeSet, r: float, max_points: int = DEFAULT_MAX_POINTS) -> LatticeSet:
    """Closed r-neighborhood {x in Z^d : d(x, A) <= r} by sphere stamping."""
    if r < 0:
        raise ValueError("radius must be nonnegative")
    if r == 0 or len(A) == 0:
        return A
    offs = ball_offsets(A.d, r).astype(np.int32)
    projected = len(A) * len(offs)
    if projected > max_points:
        raise MemoryError(
            f"neighborhood would stamp {projected} points (cap {max_points}); "
            "raise max_points or use min_dist queries"
        )
    stamped = _stamp(A.points, offs)
    return LatticeSet(stamped, A.d)


@nb.njit(cache=True)
def _stamp(points, offs):
    n, d = points.shape
    m = offs.shape[0]
    cap = 16
    while cap < 2 * n * m + 2:
        cap *= 2
    keys = np.zeros((cap, d), dtype=np.int32)
    used = np.zeros(cap, dtype=np.uint8)
    out = np.empty((n * m, d), dtype=np.int32)
    cnt = 0
    q = np.empty(d, dtype=np.int32)
    for i in range(n):
        for j in range(m):
            for k in range(d):
                q[k] = points[i, k] + offs[j, k]
            if hs.table_insert(keys, used, q):
                out[cnt] = q
                cnt += 1
    return out[:cnt]


def min_dist(x, A: LatticeSet) -> float:
    return A.min_dist(x)


# ------------------------------------------------------------ near queries


class NearIndex:
    """Fast ``d(x, A) <= r`` tests for a fixed set A and radius r.

    Coarse cells of side ``r`` give an exact candidate list (3^d cells);
    fine cells of diameter <= r give an immediate accept.
    """

    def __init__(self, A: LatticeSet, r: float):
        if r <= 0:
            raise ValueError("radius must be positive")
        self.A = A
        self.r = float(r)
        d = A.d
        self.coarse = max(1, int(math.ceil(r)))
        self.fine = max(1, int(math.floor(r / math.sqrt(d))))
        pts = A.points
        ccell = np.floor_divide(pts, self.coarse).astype(np.int32)
        order = np.lexsort(ccell.T[::-1])
        ccell_s = ccell[order]
        starts = np.concatenate(
            [[0], np.nonzero(np.any(np.diff(ccell_s, axis=0) != 0, axis=1))[0] + 1, [len(pts)]]
        ) if len(pts) else np.array([0])
        uniq = ccell_s[starts[:-1]] if len(pts) else np.zeros((0, d), np.int32)
        self.cell_keys, self.cell_used = hs.build_table(uniq, hs.capacity_for(len(uniq)))
        self.cell_slot = _slot_lookup(self.cell_keys, self.cell_used, uniq)
        self.cell_start = starts[:-1].astype(np.int64)
        self.cell_end = starts[1:].astype(np.int64)
        self.sorted_points = pts[order]
        fcell = np.unique(np.floor_divide(pts, self.fine), axis=0).astype(np.int32)
        self.fine_keys, self.fine_used = hs.build_table(fcell, hs.capacity_for(len(fcell)))
        self.offsets = np.array(list(itertools.product((-1, 0, 1), repeat=d)), dtype=np.int32)

    def args(self):
        return (
            self.cell_keys, self.cell_used, self.cell_slot, self.cell_start, self.cell_end,
            self.sorted_points, self.fine_keys, self.fine_used, self.offsets,
            self.coarse, self.fine, self.r * self.r,
        )

    def near(self, x) -> bool:
        return bool(near_query(np.asarray(x, dtype=np.int32), *self.args()))

    @cached_property
    def dilated(self) -> tuple[np.ndarray, np.ndarray]:
        """Hash table of the coarse cells within one cell of an occupied cell;
        a point whose coarse cell is absent is farther than r from A."""
        occ = np.unique(np.floor_divide(self.A.points, self.coarse), axis=0).astype(np.int32)
        cells = _dilate(occ, self.offsets)
        return hs.build_table(cells, hs.capacity_for(len(cells)))

    def fast_args(self):
        """``args()`` prefixed by the dilated-cell table (for ``near_query_fast``)."""
        return self.dilated + self.args()


@nb.njit(cache=True)
def _dilate(occ, offsets):
    n, d = occ.shape
    out = np.empty((n * offsets.shape[0], d), dtype=np.int32)
    for i in range(n):
        for o in range(offsets.shape[0]):
            for k in range(d):
                out[i * offsets.shape[0] + o, k] = occ[i, k] + offsets[o, k]
    return out


@nb.njit(cache=True)
def near_query_fast(x, dil_keys, dil_used, cell_keys, cell_used, cell_slot, cell_start, cell_end,
                    pts, fine_keys, fine_used, offsets, coarse, fine, r2):
    """``near_query`` with a one-probe rejection for points far from A."""
    d = x.shape[0]
    c = np.empty(d, dtype=np.int32)
    for k in range(d):
        c[k] = x[k] // coarse
    if not hs.table_contains(dil_keys, dil_used, c):
        return False
    return near_query(x, cell_keys, cell_used, cell_slot, cell_start, cell_end, pts,
                      fine_keys, fine_used, offsets, coarse, fine, r2)


@nb.njit(cache=True)
def _slot_lookup(keys, used, uniq):
    """Map each hash slot holding a coarse cell to that cell's group index."""
    slot = np.full(keys.shape[0], -1, dtype=np.int64)
    mask = np.uint64(keys.shape[0] - 1)
    d = keys.shape[1]
    for g in range(uniq.shape[0]):
        i = hs.point_hash(uniq[g]) & mask
        while True:
            same = True
            for k in range(d):
                if keys[i, k] != uniq[g, k]:
                    same = False
                    break
            if same:
                slot[i] = g
                break
            i = (i + np.uint64(1)) & mask
    return slot


@nb.njit(cache=True)
def _find_slot(keys, used, p):
    mask = np.uint64(keys.shape[0] - 1)
    i = hs.point_hash(p) & mask
    d = keys.shape[1]
    while used[i]:
        same = True
        for k in range(d):
            if keys[i, k] != p[k]:
                same = False
                break
        if same:
            return np.int64(i)
        i = (i + np.uint64(1)) & mask
    return np.int64(-1)


@nb.njit(cache=True)
def near_query(x, cell_keys, cell_used, cell_slot, cell_start, cell_end, pts,
               fine_keys, fine_used, offsets, coarse, fine, r2):
    d = x.shape[0]
    c = np.empty(d, dtype=np.int32)
    for k in range(d):
        c[k] = x[k] // fine
    if hs.table_contains(fine_keys, fine_used, c):
        return True
    base = np.empty(d, dtype=np.int32)
    for k in range(d):
        base[k] = x[k] // coarse
    for o in range(offsets.shape[0]):
        for k in range(d):
            c[k] = base[k] + offsets[o, k]
        s = _find_slot(cell_keys, cell_used, c)
        if s < 0:
            continue
        g = cell_slot[s]
        for j in range(cell_start[g], cell_end[g]):
            acc = 0.0
            for k in range(d):
                t = np.float64(pts[j, k] - x[k])
                acc += t * t
            if acc <= r2:
                return True
    return False


# ------------------------------------------------------------------- norms


class ThetaNorm:
    """|x|_M = (x^T M^{-1} x)^{1/2}; the Cholesky factor is computed once."""

    def __init__(self, M):
        M = np.asarray(M, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1] or not np.allclose(M, M.T, atol=1e-12):
            raise ValueError("covariance must be a symmetric square matrix")
        try:
            self.chol = np.linalg.cholesky(M)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance is singular or not positive definite") from exc
        self.M = M

    def __call__(self, x) -> np.ndarray | float:
        x = np.asarray(x, dtype=float)
        y = np.linalg.solve(self.chol, x.T if x.ndim > 1 else x)
        out = np.sqrt((y * y).sum(axis=0))
        return out if x.ndim > 1 else float(out)


def norm_theta(x, M) -> float:
    return ThetaNorm(M)(x)


def green_constant(M) -> float:
    """c_g = Gamma((d-2)/2) / (2 pi^{d/2} sqrt(det M))."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    d = M.shape[0]
    return gamma_fn((d - 2) / 2) / (2 * math.pi ** (d / 2) * math.sqrt(np.linalg.det(M)))


def green_asymptotic(x, M) -> np.ndarray | float:
    """Far-field approximation c_g |x|_M^{2-d} (infinite at the origin)."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    d = M.shape[0]
    nrm = ThetaNorm(M)(x)
    with np.errstate(divide="ignore"):
        return green_constant(M) * np.power(nrm, 2.0 - d)


def green_self_convolution_constant(M) -> float:
    """Constant C with sum_y g(y) g(x - y) ~ C |x|_M^{4-d} (d >= 5)."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    d = M.shape[0]
    if d < 5:
        raise ValueError("the Green self-convolution is finite only for d >= 5")
    cg = green_constant(M)
    riesz = math.pi ** (d / 2) * gamma_fn((d - 4) / 2) / gamma_fn((d - 2) / 2) ** 2
    return cg * cg * math.sqrt(np.linalg.det(M)) * riesz


@dataclass
class GreenTable:
    """Green function of a step law tabulated on the cube |x|_inf <= R."""

    theta: StepDist
    radius: int
    method: str
    residual: float
    reps: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    symmetric_reduction: bool = True
    boundary: str = "asymptotic"

    def __post_init__(self):
        self._keys = _encode(self.reps, self.radius) if self.symmetric_reduction else None
        if not self.symmetric_reduction:
            self._box = self.values.reshape((2 * self.radius + 1,) * self.theta.d)
        self._norm = ThetaNorm(self.theta.covariance)

    @property
    def g0(self) -> float:
        return self(np.zeros(self.theta.d, dtype=np.int64))

    def in_box(self, x) -> bool:
        return bool(np.max(np.abs(np.asarray(x))) <= self.radius)

    def __call__(self, x) -> float:
        """g(x); outside the tabulated cube the far-field form is used."""
        x = np.asarray(x, dtype=np.int64)
        if not self.in_box(x):
            return float(green_asymptotic(x, self.theta.covariance))
        if self.symmetric_reduction:
            key = _encode(np.sort(np.abs(x))[None, :], self.radius)[0]
            return float(self.values[np.searchsorted(self._keys, key)])
        return float(self._box[tuple(x + self.radius)])

    def many(self, xs) -> np.ndarray:
        return np.array([self(x) for x in np.asarray(xs)])

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "box_radius": self.radius,
            "residual": self.residual,
            "g0": self.g0,
            "boundary": self.boundary,
        }


def _encode(reps: np.ndarray, R: int) -> np.ndarray:
    base = np.int64(R + 2)
    key = np.zeros(reps.shape[0], dtype=np.int64)
    for k in range(reps.shape[1]):
        key = key * base + reps[:, k].astype(np.int64)
    return key


def _sorted_reps(d: int, R: int) -> np.ndarray:
    """All 0 <= a_1 <= ... <= a_d <= R (one point per hyperoctahedral orbit)."""
    reps = np.array(list(itertools.combinations_with_replacement(range(R + 1), d)), dtype=np.int64)
    return reps


def _orbit_sizes(reps: np.ndarray) -> np.ndarray:
    d = reps.shape[1]
    out = np.empty(reps.shape[0])
    fact = [math.factorial(i) for i in range(d + 1)]
    for i, r in enumerate(reps):
        n = fact[d]
        vals, counts = np.unique(r, return_counts=True)
        for c in counts:
            n //= fact[c]
        out[i] = n * 2 ** int(np.count_nonzero(r))
    return out


class GreenSolveError(RuntimeError):
    pass


def green_solve(
    theta: StepDist,
    box_radius: int = 32,
    boundary: str = "asymptotic",
    tol: float = 1e-13,
    max_iter: int = 20_000,
    max_unknowns: int = 5_000_000,
) -> GreenTable:
    """Solve (I - P) g = delta_0 on the cube |x|_inf <= R.

    Sites outside the cube carry Dirichlet data: zero for ``boundary =
    "absorbing"``, the far-field form c_g |x|_M^{2-d} for ``"asymptotic"``.
    Step laws invariant under the hyperoctahedral group are solved on orbit
    representatives, which keeps d = 5, R = 32 at ~4e5 unknowns.
    """
    d = theta.d
    if d < 3:
        raise ValueError("the Green function is finite only for transient walks (d >= 3)")
    if box_radius < 5:
        raise ValueError("box radius must be >= 5")
    if not theta.is_symmetric:
        raise ValueError("green_solve needs a symmetric step law")
    if boundary not in ("asymptotic", "absorbing"):
        raise ValueError(f"unknown boundary mode {boundary!r}")
    R = int(box_radius)
    M = theta.covariance
    steps = theta.steps.astype(np.int64)
    probs = theta.probs
    reduce = theta.hyperoctahedral
    if reduce:
        reps = _sorted_reps(d, R)
        weights = _orbit_sizes(reps)
    else:
        n_box = (2 * R + 1) ** d
        if n_box > max_unknowns:
            raise MemoryError(f"{n_box} unknowns exceed the cap {max_unknowns}")
        axes = [np.arange(-R, R + 1)] * d
        reps = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        weights = np.ones(len(reps))
    n = len(reps)
    if n > max_unknowns:
        raise MemoryError(f"{n} unknowns exceed the cap {max_unknowns}")
    keys = _encode(reps, R) if reduce else None

    rows, cols, vals = [], [], []
    rhs = np.zeros(n)
    idx = np.arange(n)
    for z, p in zip(steps, probs):
        y = reps + z
        inside = np.max(np.abs(y), axis=1) <= R
        if reduce:
            can = np.sort(np.abs(y[inside]), axis=1)
            j = np.searchsorted(keys, _encode(can, R))
        else:
            j = np.ravel_multi_index((y[inside] + R).T, (2 * R + 1,) * d)
        rows.append(idx[inside])
        cols.append(j)
        vals.append(np.full(j.size, -p))
        if boundary == "asymptotic" and not np.all(inside):
            rhs[~inside] += p * green_asymptotic(y[~inside].astype(float), M)
    origin = int(np.searchsorted(keys, 0)) if reduce else int(np.ravel_multi_index((np.full(d, R),), (2 * R + 1,) * d)[0])
    rhs[origin] += 1.0
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    A = A + sp.identity(n, format="csr")
    # symmetrize with the orbit sizes: W A is symmetric positive definite
    W = sp.diags(weights)
    S = (W @ A).tocsr()
    b = weights * rhs
    pre = sp.diags(1.0 / S.diagonal())
    sol, info = spla.cg(S, b, rtol=tol, atol=0.0, maxiter=max_iter, M=pre)
    resid_vec = A @ sol - rhs
    residual = float(np.max(np.abs(resid_vec)))
    if info != 0:
        raise GreenSolveError(f"CG did not converge (info={info}, residual={residual:.3g})")
    return GreenTable(
        theta=theta,
        radius=R,
        method="linear-solve",
        residual=residual,
        reps=reps,
        values=sol,
        symmetric_reduction=reduce,
        boundary=boundary,
    )
