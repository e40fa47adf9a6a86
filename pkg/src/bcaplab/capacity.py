"""Capacity estimators.

* ``newtonian_cap``: far-point hitting probabilities of the theta-walk.
* ``bcap_hitting``: far-point hitting probabilities of the critical branching
  walk, divided by g(x) and extrapolated in 1/rho.
* ``bcap_escape``: sum over K of escape probabilities of the reorganised
  left tree, with a far-field closure for what happens beyond the guard.
* ``riesz_cap``: minimal Riesz energy on a point cloud (away-step Frank-Wolfe).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy import optimize
from scipy.spatial import cKDTree

from . import _explore as X
from .distributions import OffspringDist, PeriodicityWarning, StepDist, adjoint, binary, srw_step
from .lattice import (
    GreenTable, LatticeSet, green_asymptotic, green_constant, green_self_convolution_constant,
    green_solve,
)
from ._hashset import build_table as _build_table, capacity_for
from .rng import alias_table, as_stream, stream_keys

NO_BUDGET = 2**62


class EstimatorError(ValueError):
    """Invalid estimator input (maps to the validation exit code)."""


class NumericalError(RuntimeError):
    """Numerical failure inside an estimator."""


class LowStatisticsWarning(UserWarning):
    pass


@dataclass
class CapacityEstimate:
    method: str
    K: str
    value: float
    stderr: float
    samples: int
    params: dict = field(default_factory=dict)
    truncated_fraction: float = 0.0
    batches: list = field(default_factory=list)
    per_distance: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        if not self.stderr >= 0:
            raise NumericalError(f"negative or undefined stderr {self.stderr!r}")
        if not 0.0 <= self.truncated_fraction <= 1.0:
            raise NumericalError("truncated fraction outside [0, 1]")

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def describe(K: LatticeSet) -> str:
    c = ",".join(f"{v:g}" for v in K.center)
    return f"set(n={len(K)},d={K.d},center=({c}),radius={K.radius:.6g})"


# ---------------------------------------------------------------- far points


def far_directions(d: int, n_random: int = 8, rng=None) -> np.ndarray:
    """2d axis directions followed by ``n_random`` uniform unit vectors."""
    eye = np.eye(d)
    axes = np.concatenate([eye, -eye])
    if n_random <= 0:
        return axes
    g = as_stream(rng).numpy().standard_normal((n_random, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return np.concatenate([axes, g])


def _far_points(K: LatticeSet, rho: float, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lattice points at distance ~rho from the rounded centre of K, and their
    offsets from that centre."""
    c = np.rint(K.center).astype(np.int64)
    off = np.rint(rho * dirs).astype(np.int64)
    return c + off, off


@lru_cache(maxsize=8)
def _green_table(key: tuple, radius: int) -> GreenTable:
    steps, probs, name = key
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PeriodicityWarning)
        theta = StepDist(np.array(steps), np.array(probs), name=name)
    return green_solve(theta, box_radius=radius)


def green_for(theta: StepDist, radius: int | None = None) -> GreenTable | None:
    """Cached Green table for ``theta``; None when the solver does not apply
    (then callers use the far-field form)."""
    if not (theta.is_symmetric and theta.hyperoctahedral):
        return None
    if radius is None:
        radius = {3: 40, 4: 32, 5: 24, 6: 16}.get(theta.d, 10)
    key = (tuple(map(tuple, theta.steps.tolist())), tuple(theta.probs.tolist()), theta.name)
    return _green_table(key, radius)


def _green_values(offsets: np.ndarray, theta: StepDist, table: GreenTable | None) -> np.ndarray:
    if table is None:
        return np.asarray(green_asymptotic(offsets.astype(float), theta.covariance), dtype=float)
    return table.many(offsets)


def extrapolate(rhos, values, stderrs) -> tuple[float, float, float]:
    """Weighted least squares fit value(rho) = a + b/rho; returns (a, se(a), b).

    With one distance the value itself is returned."""
    rhos = np.asarray(rhos, dtype=float)
    v = np.asarray(values, dtype=float)
    se = np.asarray(stderrs, dtype=float)
    if rhos.size == 1:
        return float(v[0]), float(se[0]), 0.0
    floor = max(se.max(), 1e-300) * 1e-6
    w = 1.0 / np.maximum(se, floor) ** 2
    A = np.stack([np.ones_like(rhos), 1.0 / rhos], axis=1)
    cov = np.linalg.inv(A.T @ (A * w[:, None]))
    a, b = cov @ (A.T @ (w * v))
    return float(a), float(math.sqrt(cov[0, 0])), float(b)


def _bernoulli_bound(n: int) -> float:
    """One-sided 95% upper bound on p after 0 successes in n trials."""
    return 1.0 - 0.05 ** (1.0 / n)


def _stream_key(rng) -> int:
    return as_stream(rng).key


def _k_arrays(K: LatticeSet):
    keys, used = K.table
    c = np.asarray(K.center, dtype=float)
    rk2 = K.radius**2 * (1 + 1e-12) + 1e-9
    return keys, used, c, rk2


def _batch_means(hits: np.ndarray, n_batches: int) -> np.ndarray:
    """hits: (directions, trials) array of scaled indicators -> batch values."""
    m = hits.shape[1]
    nb = max(1, min(n_batches, m))
    edges = np.linspace(0, m, nb + 1).astype(int)
    return np.array([hits[:, a:b].mean() for a, b in zip(edges[:-1], edges[1:])])


def _far_estimate(kind, K, theta, far_distances, directions, trials, rng, run, norm, n_batches,
                  guard_factor, label):
    """Shared driver of the far-point estimators.

    ``run(x, keys, guard2)`` returns per-trial status codes; ``norm(offsets)``
    turns a hit indicator at each offset into the estimated quantity.
    """
    d = K.d
    base = _stream_key(rng)
    dirs = far_directions(d, directions, stream_keys(base, f"{label}:directions", 1)[0].item())
    per = max(1, trials // len(dirs))
    rows, warn = [], []
    total = trunc = 0
    batches_all = []
    for rho in far_distances:
        xs, offs = _far_points(K, rho, dirs)
        scale = norm(offs)
        guard2 = (guard_factor * rho + K.radius) ** 2
        ind = np.empty((len(dirs), per))
        nhit = 0
        for j, x in enumerate(xs):
            keys = stream_keys(base, f"{label}:{rho}:{j}", per)
            st = run(x.astype(np.int32), keys, guard2)
            ind[j] = (st == X.HIT) * scale[j]
            nhit += int(np.count_nonzero(st == X.HIT))
            trunc += int(np.count_nonzero(st == X.TRUNCATED))
        total += ind.size
        b = _batch_means(ind, n_batches)
        value = float(b.mean())
        stderr = float(b.std(ddof=1) / math.sqrt(b.size)) if b.size > 1 else 0.0
        if nhit == 0:
            stderr = float(_bernoulli_bound(ind.size) * scale.mean())
            warn.append(f"no hits at far distance {rho}; stderr from the Bernoulli bound")
        # hits after leaving the guard are counted as misses: one-sided bias
        bias = value * (rho / (guard_factor * rho)) ** (d - 2)
        stderr = math.sqrt(stderr**2 + bias**2)
        rows.append({"rho": float(rho), "value": value, "stderr": stderr, "hits": nhit,
                     "trials": int(ind.size)})
        batches_all.append(b.tolist())
    a, se, slope = extrapolate([r["rho"] for r in rows], [r["value"] for r in rows],
                               [r["stderr"] for r in rows])
    if all(r["hits"] == 0 for r in rows):
        a, se = 0.0, max(r["stderr"] for r in rows)
        warnings.warn(f"{kind}: zero hits across all trials", LowStatisticsWarning, stacklevel=3)
    return rows, a, se, slope, total, trunc, warn, batches_all


def _check_far(K: LatticeSet, far_distances, min_ratio: float, what: str):
    if len(K) == 0:
        raise EstimatorError("K is empty")
    if not far_distances:
        raise EstimatorError("need at least one far distance")
    lo = min(far_distances)
    if lo < min_ratio:
        raise EstimatorError(f"{what}: far distance {lo} below the required {min_ratio:g}")


# ------------------------------------------------------------- Newtonian


def newtonian_cap(K: LatticeSet, theta: StepDist | None = None, far_distances=None,
                  directions: int = 8, trials: int = 200_000, rng=None, guard_factor: float = 8.0,
                  n_batches: int = 20, max_steps: int | None = None,
                  descriptor: str | None = None) -> CapacityEstimate:
    """lim |x|^{d-2} P_x(theta-walk hits K), extrapolated in 1/rho.

    Each far distance uses ``trials`` walks spread over the 2d axis directions
    plus ``directions`` random ones."""
    d = K.d
    theta = srw_step(d) if theta is None else theta
    if d < 3:
        raise EstimatorError("the Newtonian capacity needs d >= 3")
    if theta.d != d:
        raise EstimatorError("step law and K have different dimensions")
    if far_distances is None:
        r0 = max(4.0, 2 * K.diameter)
        far_distances = [r0, 1.5 * r0, 2 * r0]
    _check_far(K, far_distances, 2 * K.diameter, "newtonian_cap")
    keys_t, used, c, rk2 = _k_arrays(K)
    steps = theta.steps.astype(np.int32)
    sq, sa = alias_table(theta.probs)
    cap_steps = NO_BUDGET if max_steps is None else int(max_steps)

    def run(x, keys, guard2):
        return X.walk_hit_batch(keys, x, steps, sq, sa, keys_t, used, c, rk2, guard2, cap_steps)

    def norm(offs):
        return np.linalg.norm(offs.astype(float), axis=1) ** (d - 2)

    rows, a, se, slope, total, trunc, warn, batches = _far_estimate(
        "newtonian_cap", K, theta, far_distances, directions, trials, rng, run, norm, n_batches,
        guard_factor, "newton")
    return CapacityEstimate(
        "newtonian", descriptor or describe(K), a, se, total,
        params={"theta": theta.spec(), "far_distances": list(map(float, far_distances)),
                "directions": 2 * d + directions, "guard_factor": guard_factor,
                "slope_1_over_rho": slope, "n_batches": n_batches},
        truncated_fraction=trunc / total, batches=batches, per_distance=rows, warnings=warn)


# ------------------------------------------------------- branching capacity


def _laws(mu: OffspringDist, theta: StepDist):
    oq, oa = alias_table(mu.probs)
    aq, aa = alias_table(adjoint(mu).probs)
    sq, sa = alias_table(theta.probs)
    return oq, oa, aq, aa, theta.steps.astype(np.int32), sq, sa


def bcap_hitting(K: LatticeSet, mu: OffspringDist | None = None, theta: StepDist | None = None,
                 far_distances=None, directions: int = 8, trials: int = 200_000,
                 budget: int | None = None, rng=None, guard_factor: float = 4.0,
                 lam: float = 3.0, n_batches: int = 20, green: GreenTable | None | str = "auto",
                 truncation_cap: float = 1e-3, descriptor: str | None = None) -> CapacityEstimate:
    """lim P_x(range of the critical branching walk from x hits K) / g(x).

    ``trials`` trees per far distance, spread over 2d axis directions plus
    ``directions`` random ones.  Trees are explored depth-first and stopped
    at the first vertex in K; vertices beyond ``guard_factor * rho`` are not
    expanded.  ``budget`` caps the explored vertices per tree (None: no cap).
    """
    d = K.d
    mu = binary() if mu is None else mu
    theta = srw_step(d) if theta is None else theta
    if d < 5:
        raise EstimatorError("branching capacity estimators need d >= 5")
    if theta.d != d:
        raise EstimatorError("step law and K have different dimensions")
    R = max(K.radius, 1.0)
    if far_distances is None:
        r0 = max(8.0, (1 + lam) * R)
        far_distances = [r0, 1.5 * r0, 2 * r0]
    _check_far(K, far_distances, (1 + lam) * K.radius, "bcap_hitting")
    table = green_for(theta) if isinstance(green, str) else green
    keys_t, used, c, rk2 = _k_arrays(K)
    oq, oa, _, _, steps, sq, sa = _laws(mu, theta)
    cap = NO_BUDGET if budget is None else int(budget)

    def run(x, keys, guard2):
        st, _ = X.hit_batch(keys, x, oq, oa, steps, sq, sa, keys_t, used, c, rk2, guard2, cap)
        return st

    def norm(offs):
        return 1.0 / _green_values(offs, theta, table)

    rows, a, se, slope, total, trunc, warn, batches = _far_estimate(
        "bcap_hitting", K, theta, far_distances, directions, trials, rng, run, norm, n_batches,
        guard_factor, "bcap-hit")
    tf = trunc / total
    if tf > truncation_cap:
        warn.append(f"truncated fraction {tf:.3g} exceeds {truncation_cap:g}")
    return CapacityEstimate(
        "bcap-hitting", descriptor or describe(K), a, se, total,
        params={"mu": mu.spec(), "theta": theta.spec(),
                "far_distances": list(map(float, far_distances)),
                "directions": 2 * d + directions, "guard_factor": guard_factor,
                "budget": budget, "slope_1_over_rho": slope, "n_batches": n_batches,
                "green": table.as_dict() if table is not None else "asymptotic"},
        truncated_fraction=tf, batches=batches, per_distance=rows, warnings=warn)


@dataclass
class ExitPairs:
    """(point, step) pairs leaving K with their step probabilities."""

    point: np.ndarray
    step: np.ndarray
    weight: np.ndarray

    @property
    def total(self) -> float:
        return float(self.weight.sum())

    @property
    def exposed(self) -> int:
        return int(np.unique(self.point).size)


def exit_pairs(K: LatticeSet, theta: StepDist) -> ExitPairs:
    keys, used = K.table
    pp, ps, w = X.exit_pairs(K.points, theta.steps.astype(np.int32), theta.probs, keys, used)
    return ExitPairs(pp, ps, w)


def closure_solve(total: float, escaped: np.ndarray, far: np.ndarray) -> tuple[float, float]:
    """Solve B = total * mean(1{esc} exp(-B S)) and its delta-method stderr.

    ``S`` is the far-field exposure of an escaped trial: the expected number
    of future visits to K per unit of capacity, so exp(-B S) is the chance
    the unexplored part avoids K."""
    esc = escaped.astype(float)
    n = esc.size
    raw = total * esc.mean()
    if raw == 0.0:
        return 0.0, 0.0
    f = lambda b: b - total * np.mean(esc * np.exp(-b * far))
    B = optimize.brentq(f, 0.0, raw, xtol=1e-12 * raw, rtol=1e-12)
    Z = total * esc * np.exp(-B * far)
    dz = np.mean(Z * far)
    se = float(np.std(Z, ddof=1) / math.sqrt(n) / (1.0 + dz)) if n > 1 else 0.0
    return float(B), se


@dataclass
class EscapeGeometry:
    """Guard cells and far-field clusters used by the escape estimator.

    The guard is the union of the cells of side ``side`` that lie within one
    cell (Chebyshev) of a cell meeting K, so every vertex outside it is at
    distance > ``side`` from K.  Clusters group K by cells of side
    ``cluster_side``; a cluster sits at the exit-weighted mean of its points
    and carries its share of the exit weight.
    """

    side: int
    cells: np.ndarray
    cluster_side: int
    cluster_points: np.ndarray
    cluster_weights: np.ndarray

    @classmethod
    def build(cls, K: LatticeSet, pairs: "ExitPairs", side: int, cluster_side: int | None = None):
        side = max(1, int(side))
        occ = np.unique(np.floor_divide(K.points, side), axis=0).astype(np.int32)
        cells = np.unique(X.dilate_cells(occ, 1), axis=0)
        cs = max(1, side // 4) if cluster_side is None else max(1, int(cluster_side))
        w = np.bincount(pairs.point, weights=pairs.weight, minlength=len(K))
        keep = w > 0
        pts = K.points[keep].astype(float)
        w = w[keep]
        lab = np.floor_divide(K.points[keep], cs)
        _, inv = np.unique(lab, axis=0, return_inverse=True)
        inv = inv.ravel()
        m = inv.max() + 1
        cw = np.bincount(inv, weights=w, minlength=m)
        cp = np.stack([np.bincount(inv, weights=w * pts[:, k], minlength=m) for k in range(K.d)],
                      axis=1) / cw[:, None]
        return cls(side, cells, cs, cp, cw / cw.sum())


def bcap_escape(K: LatticeSet, mu: OffspringDist | None = None, theta: StepDist | None = None,
                trials: int = 100_000, budget: int | None = None, rng=None,
                guard: float | None = None, guard_factor: float = 4.0, min_guard: int = 6,
                closure: bool = True, n_batches: int = 20, chunk: int = 2000,
                truncation_cap: float = 1e-3, descriptor: str | None = None) -> CapacityEstimate:
    """Bcap(K) = sum_{y in K} P_y(the reorganised left tree from y avoids K after time 0).

    Trials pick an exit pair (y, e) with probability proportional to theta(e)
    (y in K, y + e outside K); the first spine step is e.  The tree is
    expanded only within a guard neighbourhood of K of width ``guard``
    (default max(min_guard, guard_factor * r_K)); what lies beyond is
    accounted for by the far-field closure (``closure=False`` reports the raw
    in-guard escape frequency instead).
    """
    d = K.d
    mu = binary() if mu is None else mu
    theta = srw_step(d) if theta is None else theta
    if d < 5:
        raise EstimatorError("branching capacity estimators need d >= 5")
    if theta.d != d:
        raise EstimatorError("step law and K have different dimensions")
    if len(K) == 0:
        raise EstimatorError("K is empty")
    if trials < 2:
        raise EstimatorError("need at least two trials")
    pairs = exit_pairs(K, theta)
    W = pairs.total
    if guard is None:
        guard = max(min_guard, guard_factor * K.radius)
    geo = EscapeGeometry.build(K, pairs, int(math.ceil(guard)))
    gkeys, gused = _build_table(geo.cells, capacity_for(len(geo.cells)))
    keys_t, used, c, rk2 = _k_arrays(K)
    oq, oa, aq, aa, steps, sq, sa = _laws(mu, theta)
    minv = np.linalg.inv(theta.covariance)
    cg = green_constant(theta.covariance)
    spine_coef = 0.5 * mu.sigma2 * green_self_convolution_constant(theta.covariance)
    cap = NO_BUDGET if budget is None else int(budget)
    cdf = np.cumsum(pairs.weight) / W
    cdf[-1] = 1.0 + 1e-15
    base = _stream_key(rng)
    status = np.empty(trials, dtype=np.int8)
    far = np.empty(trials)
    sizes = np.empty(trials, dtype=np.int64)
    for a in range(0, trials, chunk):
        m = min(chunk, trials - a)
        keys = stream_keys(base, "bcap-escape", m, start=a)
        st, sz, f = X.escape_batch(keys, K.points, pairs.point, pairs.step, cdf, oq, oa, aq, aa,
                                   steps, sq, sa, keys_t, used, c, rk2, gkeys, gused, geo.side,
                                   cap, geo.cluster_points, geo.cluster_weights, minv, float(d),
                                   spine_coef, cg)
        status[a:a + m], sizes[a:a + m], far[a:a + m] = st, sz, f
    esc = status == X.MISS
    warn = []
    if closure:
        B, se = closure_solve(W, esc, far)
        Z = W * esc * np.exp(-B * far)
    else:
        Z = W * esc.astype(float)
        B = float(Z.mean())
        se = float(Z.std(ddof=1) / math.sqrt(trials))
    if not esc.any():
        se = W * _bernoulli_bound(trials)
        warn.append("no escapes; stderr from the Bernoulli bound")
        warnings.warn("bcap_escape: no escaping trials", LowStatisticsWarning, stacklevel=2)
    tf = float(np.mean(status == X.TRUNCATED))
    if tf > truncation_cap:
        warn.append(f"truncated fraction {tf:.3g} exceeds {truncation_cap:g}")
    edges = np.linspace(0, trials, min(n_batches, trials) + 1).astype(int)
    batches = [float(Z[i:j].mean()) for i, j in zip(edges[:-1], edges[1:])]
    return CapacityEstimate(
        "bcap-escape", descriptor or describe(K), B, se, trials,
        params={"mu": mu.spec(), "theta": theta.spec(), "guard": geo.side,
                "cluster_side": geo.cluster_side, "clusters": int(geo.cluster_weights.size),
                "budget": budget, "closure": closure, "exit_weight": W,
                "exposed_points": pairs.exposed, "escape_fraction": float(esc.mean()),
                "raw_value": float(W * esc.mean()), "mean_vertices": float(sizes.mean())},
        truncated_fraction=tf, batches=batches, warnings=warn)


# ------------------------------------------------------------------ Riesz


class NonPSDKernel(NumericalError):
    pass


def default_kappa(gamma: float) -> float:
    """Diagonal loading constant: 2^gamma/(2 - gamma) below 2, 2^gamma above."""
    return 2.0**gamma / (2.0 - gamma) if gamma < 2 else 2.0**gamma


def pitch(points: np.ndarray) -> np.ndarray:
    """Nearest-neighbour distance of every point of a cloud (its cell size)."""
    dist, _ = cKDTree(points).query(points, k=2)
    return dist[:, 1]


@dataclass
class RieszSolution:
    points: np.ndarray
    weights: np.ndarray
    energy: float
    capacity: float
    gap: float
    gamma: float
    kappa: float
    pitch: float  # median cell size
    iterations: int
    converged: bool
    interaction_energy: float
    energies: np.ndarray = field(repr=False, default=None)

    def to_dict(self, with_points: bool = False) -> dict:
        out = {k: _plain(getattr(self, k)) for k in
               ("energy", "capacity", "gap", "gamma", "kappa", "pitch", "iterations",
                "converged", "interaction_energy")}
        out["weights"] = self.weights.tolist()
        if with_points:
            out["points"] = self.points.tolist()
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def riesz_kernel(points: np.ndarray, gamma: float, diag) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    r = np.sqrt((diff * diff).sum(axis=-1))
    np.fill_diagonal(r, 1.0)
    A = r ** (-gamma)
    np.fill_diagonal(A, diag)
    return A


def riesz_cap(points, gamma: float, tol: float = 1e-9, max_iters: int = 100_000,
              kappa: float | None = None, h: float | None = None,
              check_psd: bool = True) -> RieszSolution:
    """Minimise nu^T A nu over the simplex, A_ij = |x_i - x_j|^{-gamma} off the
    diagonal and kappa h_i^{-gamma} on it, h_i the nearest-neighbour distance
    of point i (or the scalar ``h`` when given).  Away-step Frank-Wolfe with exact line search; stops when
    the Frank-Wolfe gap falls below ``tol`` times the energy."""
    P = np.asarray(points, dtype=float)
    if P.ndim != 2 or P.shape[0] < 2:
        raise EstimatorError("riesz_cap needs at least two points")
    n, d = P.shape
    if not 0 < gamma < d:
        raise EstimatorError(f"gamma must lie in (0, d) = (0, {d}), got {gamma}")
    if np.unique(P, axis=0).shape[0] != n:
        raise EstimatorError("support points must be pairwise distinct")
    kappa = default_kappa(gamma) if kappa is None else float(kappa)
    hs = pitch(P) if h is None else np.full(n, float(h))
    diag = kappa * hs ** (-gamma)
    A = riesz_kernel(P, gamma, diag)
    if check_psd:
        try:
            np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            raise NonPSDKernel(
                f"kernel with diagonal {kappa:g}*h_i^-gamma is not positive definite; "
                "use a larger kappa") from None
    nu = np.full(n, 1.0 / n)
    Anu = A @ nu
    E = float(nu @ Anu)
    energies = [E]
    it = 0
    converged = False
    gap = math.inf
    while it < max_iters:
        grad = Anu  # half the gradient
        s = int(np.argmin(grad))
        avg = float(nu @ grad)
        gap = 2.0 * (avg - grad[s])
        if gap <= tol * E:
            converged = True
            break
        supp = np.flatnonzero(nu > 0)
        a = int(supp[np.argmax(grad[supp])])
        if avg - grad[s] >= grad[a] - avg:
            Ad = A[:, s] - Anu
            dnu = -nu.copy()
            dnu[s] += 1.0
            tmax = 1.0
        else:
            if nu[a] >= 1.0:
                break
            Ad = Anu - A[:, a]
            dnu = nu.copy()
            dnu[a] -= 1.0
            tmax = nu[a] / (1.0 - nu[a])
        slope = float(dnu @ Anu)
        curv = float(dnu @ Ad)
        t = tmax if curv <= 0 else min(tmax, max(0.0, -slope / curv))
        if t <= 0:
            converged = True
            break
        new = nu + t * dnu
        if t == tmax and tmax != 1.0:
            new[a] = 0.0
        new = np.clip(new, 0.0, None)
        it += 1
        if it % 500:
            # exact quadratic update; a full product every 500 steps bounds drift
            newA = Anu + t * Ad
            E_new = E + 2.0 * t * slope + t * t * curv
        else:
            newA = A @ new
            E_new = float(new @ newA)
        nu, Anu, E = new, newA, E_new
        energies.append(E)
    s = nu.sum()
    if abs(s - 1.0) > 1e-10:
        raise NumericalError(f"simplex drift: weights sum to {s!r}")
    off = E - float(np.sum(nu * nu * diag))
    return RieszSolution(P, nu, E, 1.0 / E, gap, float(gamma), kappa, float(np.median(hs)), it,
                         converged, off,
                         np.array(energies))


@dataclass
class CapSurrogate:
    """Cap_{d-4}(A) standing in for the Brownian-snake capacity of A.

    The two are comparable up to positive constants c1, c2 that are not
    known; ``interval(c1, c2)`` gives the implied range for assumed constants.
    """

    d: int
    gamma: float
    value: float
    solution: RieszSolution
    label: str = "comparability surrogate Cap_{d-4}; not the Brownian snake capacity"

    def interval(self, c1: float, c2: float) -> tuple[float, float]:
        return c1 * self.value, c2 * self.value

    def to_dict(self) -> dict:
        return {"d": self.d, "gamma": self.gamma, "surrogate_value": self.value,
                "label": self.label, "gap": self.solution.gap}


def bscap_surrogate(A, d: int, **kw) -> CapSurrogate:
    if d < 5:
        raise EstimatorError("the surrogate is defined for d >= 5")
    sol = riesz_cap(A, d - 4, **kw)
    return CapSurrogate(d, float(d - 4), sol.capacity, sol)
