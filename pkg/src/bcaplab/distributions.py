"""Offspring laws, their tilts, and lattice step laws."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import stats

TOL = 1e-12
TAIL_EPS = 1e-14


class PrecisionError(ValueError):
    """A truncated law cannot be represented to the required accuracy."""


class PeriodicityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class IntegerLaw:
    """Finite law on consecutive integers ``offset, offset + 1, ...``."""

    probs: np.ndarray
    offset: int = 0

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("probability vector must be one-dimensional and nonempty")
        if np.any(p < -TOL):
            raise ValueError("negative probability")
        if abs(p.sum() - 1.0) > TOL:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        p = np.clip(p, 0.0, None)
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def support(self) -> np.ndarray:
        return np.arange(self.offset, self.offset + self.probs.size)

    def pmf(self, k: int) -> float:
        i = k - self.offset
        return float(self.probs[i]) if 0 <= i < self.probs.size else 0.0

    @cached_property
    def mean(self) -> float:
        return float(np.dot(self.support, self.probs))

    @cached_property
    def variance(self) -> float:
        s = self.support
        return float(np.dot(s * s, self.probs) - self.mean**2)

    @cached_property
    def cdf(self) -> np.ndarray:
        c = np.cumsum(self.probs)
        c[-1] = 1.0 + 1e-15  # guard the inverse-CDF search against u ~ 1
        c.setflags(write=False)
        return c

    @cached_property
    def period(self) -> int:
        """gcd of differences between support points (1 for a single atom at 0)."""
        pts = self.support[self.probs > 0]
        g = 0
        for v in pts - pts[0]:
            g = math.gcd(g, int(v))
        return g if g else 1

    def sample(self, stream) -> int:
        return self.offset + stream.choice_cdf(self.cdf)


@dataclass(frozen=True)
class OffspringDist(IntegerLaw):
    """Critical offspring law on ``{0, 1, 2, ...}`` (mean 1, finite variance)."""

    name: str = "table"
    params: tuple = ()

    def __post_init__(self):
        super().__post_init__()
        if self.offset != 0:
            raise ValueError("offspring laws live on {0, 1, 2, ...}")
        if abs(self.mean - 1.0) > TOL:
            raise ValueError(f"offspring law must be critical, mean = {self.mean!r}")
        if self.pmf(1) >= 1.0 - TOL:
            raise ValueError("offspring law with mu(1) = 1 is degenerate")
        if not 0.0 < self.sigma2 < math.inf:
            raise ValueError("offspring variance must lie in (0, inf)")

    @property
    def sigma2(self) -> float:
        s = self.support
        return float(np.dot(s * s, self.probs) - 1.0)

    @property
    def max_support(self) -> int:
        return self.probs.size - 1

    def spec(self) -> str:
        if self.name == "table":
            return "table([" + ",".join(repr(float(p)) for p in self.probs) + "])"
        if self.params:
            return f"{self.name}({','.join(repr(p) for p in self.params)})"
        return self.name


def binary() -> OffspringDist:
    return OffspringDist(np.array([0.5, 0.0, 0.5]), name="binary")


def _truncate(logpmf, max_support: int | None) -> np.ndarray:
    """Tabulate a parametric pmf until the remaining tail drops below TAIL_EPS."""
    limit = max_support if max_support is not None else 10_000
    k = np.arange(limit + 1)
    p = np.exp(logpmf(k))
    tail = 1.0 - np.cumsum(p)
    ok = np.nonzero(tail < TAIL_EPS)[0]
    if ok.size == 0:
        if max_support is not None and tail[-1] <= TOL:
            cut = limit
        else:
            raise PrecisionError(
                f"tail mass {tail[-1]:.3g} beyond k={limit} exceeds {TOL:g}"
            )
    else:
        cut = int(ok[0])
    p = p[: cut + 1].copy()
    # fold the residual tail into the last atom keeping the mean at 1
    resid = 1.0 - p.sum()
    p[-1] += resid
    return p


def geometric(p: float = 0.5, max_support: int | None = None) -> OffspringDist:
    """mu(k) = (1 - p)^k p; critical only for p = 1/2."""
    if not 0.0 < p < 1.0:
        raise ValueError("geometric parameter must lie in (0, 1)")
    probs = _truncate(lambda k: k * math.log1p(-p) + math.log(p), max_support)
    return _fix_mean(probs, "geometric", (p,))


def poisson(lam: float = 1.0, max_support: int | None = None) -> OffspringDist:
    probs = _truncate(lambda k: stats.poisson.logpmf(k, lam), max_support)
    return _fix_mean(probs, "poisson", (lam,))


def _fix_mean(probs: np.ndarray, name: str, params: tuple) -> OffspringDist:
    # truncation shifts the mean by < 1e-12 for critical laws; rebalance with
    # atoms 0 and 2 so the stored table is exactly critical
    err = float(np.dot(np.arange(probs.size), probs)) - 1.0
    if abs(err) > 1e-9:
        raise ValueError(f"{name}{params} is not critical (mean - 1 = {err:.3g})")
    if probs.size > 2 and err != 0.0:
        probs = probs.copy()
        probs[2] -= err / 2
        probs[0] += err / 2
    return OffspringDist(probs, name=name, params=params)


def table(probs: Sequence[float]) -> OffspringDist:
    return OffspringDist(np.asarray(probs, dtype=float), name="table")


def adjoint(mu: OffspringDist) -> IntegerLaw:
    """Tail-sum law mu~(k) = sum_{j > k} mu(j) of the adjoint tree's root."""
    p = mu.probs
    tail = np.cumsum(p[::-1])[::-1]  # tail[k] = sum_{j >= k} mu(j)
    tilt = tail[1:] if p.size > 1 else np.array([1.0])
    if abs(tilt.sum() - 1.0) > TOL:
        raise PrecisionError(f"adjoint tail sums add to {tilt.sum()!r}")
    return IntegerLaw(tilt / tilt.sum())


def lukasiewicz_step(mu: OffspringDist) -> IntegerLaw:
    """Step law P(Y_1 = i) = mu(i + 1), i >= -1."""
    return IntegerLaw(mu.probs, offset=-1)


def split_table(mu: OffspringDist) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Joint law of the (left, right) child split at a spine vertex.

    Returns arrays ``left, right, prob`` listing every (i, j) with
    mu(i + j + 1) > 0 and probability mu(i + j + 1).
    """
    left, right, prob = [], [], []
    for k in range(1, mu.probs.size):
        if mu.probs[k] <= 0:
            continue
        for i in range(k):
            left.append(i)
            right.append(k - 1 - i)
            prob.append(mu.probs[k])
    prob = np.asarray(prob)
    return np.asarray(left), np.asarray(right), prob / prob.sum()


def parse_offspring(spec: str) -> OffspringDist:
    """Parse ``binary``, ``geometric(p)``, ``poisson``, ``poisson(lam)``, ``table([...])``."""
    s = spec.strip().replace(" ", "")
    name, args = _split_call(s)
    if name == "binary" and not args:
        return binary()
    if name == "geometric":
        return geometric(float(args[0]) if args else 0.5)
    if name == "poisson":
        return poisson(float(args[0]) if args else 1.0)
    if name == "table":
        return table([float(a) for a in args])
    raise ValueError(f"unknown offspring law {spec!r}")


def _split_call(s: str) -> tuple[str, list[str]]:
    if "(" not in s:
        return s, []
    name, rest = s.split("(", 1)
    if not rest.endswith(")"):
        raise ValueError(f"malformed law {s!r}")
    body = rest[:-1].replace("[", "").replace("]", "")
    return name, [a for a in body.split(",") if a]


# --------------------------------------------------------------------- steps


def lattice_index(vectors: np.ndarray, d: int) -> int:
    """Index of the lattice spanned by ``vectors`` in Z^d (0 if rank < d)."""
    vecs = np.asarray(vectors, dtype=np.int64).reshape(-1, d)
    vecs = vecs[np.any(vecs != 0, axis=1)]
    if vecs.shape[0] == 0:
        return 0
    B = _echelon(vecs)
    if B.shape[0] < d:
        return 0
    return int(abs(round(np.prod(np.diag(B).astype(float)))))


def _echelon(vecs: np.ndarray) -> np.ndarray:
    pool = [list(map(int, v)) for v in vecs]
    d = len(pool[0])
    basis = []
    for col in range(d):
        nz = [r for r in pool if r[col] != 0]
        rest = [r for r in pool if r[col] == 0]
        while len(nz) > 1:
            nz.sort(key=lambda r: abs(r[col]))
            p = nz[0]
            new = [p]
            for r in nz[1:]:
                q = r[col] // p[col]
                r2 = [a - q * b for a, b in zip(r, p)]
                if r2[col] != 0:
                    new.append(r2)
                elif any(r2):
                    rest.append(r2)
            nz = new
        if nz:
            p = nz[0]
            if p[col] < 0:
                p = [-a for a in p]
            basis.append(p)
        pool = rest
    return np.array(basis, dtype=np.int64).reshape(-1, d)


@dataclass(frozen=True, eq=False)
class StepDist:
    """Finitely supported step law on Z^d."""

    steps: np.ndarray  # (m, d) int
    probs: np.ndarray  # (m,)
    name: str = "table"
    params: tuple = ()
    covariance: np.ndarray = field(init=False)
    is_symmetric: bool = field(init=False)
    is_aperiodic: bool = field(init=False)

    def __post_init__(self):
        z = np.atleast_2d(np.asarray(self.steps, dtype=np.int64))
        p = np.asarray(self.probs, dtype=float)
        keep = p > 0
        z, p = z[keep], p[keep]
        if abs(p.sum() - 1.0) > TOL:
            raise ValueError(f"step probabilities sum to {p.sum()!r}")
        d = z.shape[1]
        cov = (z.T * p) @ z
        table_ = {tuple(v): q for v, q in zip(z.tolist(), p)}
        sym = all(abs(table_.get(tuple(-np.asarray(v)), 0.0) - q) <= TOL for v, q in table_.items())
        if lattice_index(z, d) != 1:
            raise ValueError("step law support does not generate Z^d (not irreducible)")
        # steps generate Z^d, so the period is the index of the lattice of
        # differences z_i - z_0 (z_0 generates the cyclic quotient)
        period = lattice_index(z - z[0], d)
        aperiodic = period == 1
        if not aperiodic:
            warnings.warn(
                f"step law {self.name} is periodic (period {period})", PeriodicityWarning, stacklevel=3
            )
        for arr in (z, p, cov):
            arr.setflags(write=False)
        object.__setattr__(self, "steps", z.astype(np.int32))
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "is_symmetric", sym)
        object.__setattr__(self, "is_aperiodic", aperiodic)

    @property
    def d(self) -> int:
        return int(self.steps.shape[1])

    @cached_property
    def cdf(self) -> np.ndarray:
        c = np.cumsum(self.probs)
        c[-1] = 1.0 + 1e-15
        return c

    @cached_property
    def mean(self) -> np.ndarray:
        return self.probs @ self.steps

    @cached_property
    def det_cov(self) -> float:
        return float(np.linalg.det(self.covariance))

    @cached_property
    def hyperoctahedral(self) -> bool:
        """Invariant under every coordinate permutation and sign flip."""
        canon: dict[tuple, float] = {}
        counts: dict[tuple, int] = {}
        for v, q in zip(self.steps.tolist(), self.probs):
            key = tuple(sorted(abs(a) for a in v))
            canon.setdefault(key, q)
            if abs(canon[key] - q) > TOL:
                return False
            counts[key] = counts.get(key, 0) + 1
        return all(counts[k] == _orbit_size(k) for k in counts)

    def sample(self, stream) -> np.ndarray:
        return self.steps[stream.choice_cdf(self.cdf)]

    def spec(self) -> str:
        if self.params:
            return f"{self.name}({','.join(repr(p) for p in self.params)})"
        return self.name


def _orbit_size(sorted_abs: tuple) -> int:
    d = len(sorted_abs)
    n = math.factorial(d)
    for v in set(sorted_abs):
        n //= math.factorial(sorted_abs.count(v))
    return n * 2 ** sum(1 for a in sorted_abs if a != 0)


def srw_step(d: int, laziness: float = 0.0) -> StepDist:
    if d < 1:
        raise ValueError("dimension must be >= 1")
    if not 0.0 <= laziness < 1.0:
        raise ValueError("laziness must lie in [0, 1)")
    eye = np.eye(d, dtype=np.int64)
    steps = np.concatenate([eye, -eye])
    probs = np.full(2 * d, (1.0 - laziness) / (2 * d))
    if laziness > 0:
        steps = np.concatenate([np.zeros((1, d), dtype=np.int64), steps])
        probs = np.concatenate([[laziness], probs])
    with warnings.catch_warnings():
        if laziness == 0:
            warnings.simplefilter("ignore", PeriodicityWarning)
        return StepDist(steps, probs, name="srw", params=(d, laziness))


def box_step(d: int, radius: int = 1) -> StepDist:
    """Uniform law on the cube {z : max_i |z_i| <= radius}."""
    if radius < 1:
        raise ValueError("box radius must be >= 1")
    axes = [np.arange(-radius, radius + 1)] * d
    steps = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    probs = np.full(len(steps), 1.0 / len(steps))
    return StepDist(steps, probs, name="box", params=(d, radius))


def table_step(steps, probs) -> StepDist:
    return StepDist(np.asarray(steps), np.asarray(probs, dtype=float), name="table")


def parse_step(spec: str, d: int | None = None) -> StepDist:
    """Parse ``srw(d, laziness)``, ``srw``, ``box(d, radius)``.

    ``table`` steps are given in config files as ``table(z1;z2;...|p1,p2,...)``
    with coordinates separated by spaces inside each z.
    """
    s = spec.strip()
    if s.startswith("table("):
        body = s[len("table(") : -1]
        pts, probs = body.split("|")
        steps = [[int(a) for a in z.split()] for z in pts.split(";")]
        return table_step(steps, [float(p) for p in probs.split(",")])
    name, args = _split_call(s.replace(" ", ""))
    if name == "srw":
        dim = int(args[0]) if args else d
        lazy = float(args[1]) if len(args) > 1 else 0.0
        if dim is None:
            raise ValueError("srw needs a dimension")
        return srw_step(dim, lazy)
    if name == "box":
        dim = int(args[0]) if args else d
        rad = int(args[1]) if len(args) > 1 else 1
        if dim is None:
            raise ValueError("box needs a dimension")
        return box_step(dim, rad)
    raise ValueError(f"unknown step law {spec!r}")
