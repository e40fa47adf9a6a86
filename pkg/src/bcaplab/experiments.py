"""Scripted experiments: range capacity across dimensions, the intersection
statistic, spine fractions, exact identities and the constant c_theta.

Every task draws from its own counter-based stream keyed by
``(seed, experiment label, task index)`` and results are gathered in task
order, so reports do not depend on the number of workers.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numba as nb
import numpy as np
from scipy.special import gamma as gamma_fn

from . import _explore as X
from . import capacity, trees
from .brw import translation_check
from .distributions import OffspringDist, StepDist, binary, srw_step
from .lattice import LatticeSet, NearIndex, green_constant
from .rng import Stream, alias_table, sample_cdf, stream_key, stream_keys

__all__ = [
    "ExperimentReport", "run_range_capacity", "run_intersection", "run_spine_fraction",
    "run_identity_suite", "run_c_theta", "sample_path",
]


@dataclass
class ExperimentReport:
    experiment: str
    config: dict
    seed: int
    columns: list
    rows: list
    detail_columns: list = field(default_factory=list)
    detail_rows: list = field(default_factory=list)
    wall_clock: float = 0.0
    passed: bool | None = None
    notes: list = field(default_factory=list)

    def csv_text(self, detail: bool = False) -> str:
        cols = self.detail_columns if detail else self.columns
        rows = self.detail_rows if detail else self.rows
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in cols])
        return buf.getvalue()

    def sidecar(self) -> dict:
        return {
            "experiment": self.experiment,
            "seed": self.seed,
            "config": self.config,
            "columns": self.columns,
            "detail_columns": self.detail_columns,
            "wall_clock_seconds": self.wall_clock,
            "passed": self.passed,
            "notes": self.notes,
        }

    def stem(self) -> str:
        return f"{self.experiment}_seed{self.seed}"

    def write(self, outdir) -> list[Path]:
        """Write ``<id>_seed<s>.csv``, the per-sample CSV if any, the JSON
        sidecar and a column schema file; returns the paths."""
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"{self.stem()}.csv"]
        paths[0].write_text(self.csv_text())
        if self.detail_rows:
            paths.append(out / f"{self.stem()}_samples.csv")
            paths[-1].write_text(self.csv_text(detail=True))
        paths.append(out / f"{self.stem()}.json")
        paths[-1].write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True, default=_jsonable))
        paths.append(out / f"{self.stem()}_schema.txt")
        paths[-1].write_text(_schema(self))
        return paths


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


COLUMN_DOCS = {
    "n": "walk length / horizon",
    "walk": "index of the xi sample",
    "size": "number of distinct sites of xi[0,n]",
    "bcap": "branching capacity estimate of xi[0,n]",
    "bcap_stderr": "standard error of bcap",
    "statistic": "normalised capacity (Bcap/n for d>=7, (log n/n)Bcap for d=6, Bcap/sqrt(n) for d=5)",
    "stat_stderr": "standard error of statistic",
    "samples": "Monte Carlo samples behind the row",
    "median": "median of statistic over xi samples",
    "q25": "lower quartile of statistic",
    "q75": "upper quartile of statistic",
    "iqr": "interquartile range of statistic",
    "mean": "mean of statistic",
    "stderr": "standard error of the row's main value",
    "pooled_stderr": "root mean square of the per-sample stderrs",
    "walks": "number of xi samples",
    "ratio_to_limit": "statistic median divided by the d=6 limit constant",
    "truncated_fraction": "fraction of trials stopped by the vertex budget",
    "eps": "neighbourhood radius in units of sqrt(n)",
    "nI": "n times the estimated intersection probability",
    "filter": "1 if xi[0,n] was required to stay in B(0, eta|x_n|)",
    "filter_rate": "fraction of xi samples inside B(0, eta|x_n|)",
    "trees": "critical trees simulated",
    "r": "threshold fraction",
    "count": "samples with spine count above r n",
    "frequency": "count / samples",
    "check": "identity checked",
    "value": "left side or computed value",
    "reference": "right side or reference value",
    "error": "absolute discrepancy or test statistic",
    "pass": "1 if the check passed",
    "escape_fraction": "fraction of escape trials that escaped",
}


def _schema(rep: ExperimentReport) -> str:
    lines = [f"# columns of {rep.stem()}.csv"]
    lines += [f"{c}: {COLUMN_DOCS.get(c, '')}" for c in rep.columns]
    if rep.detail_columns:
        lines.append(f"# columns of {rep.stem()}_samples.csv")
        lines += [f"{c}: {COLUMN_DOCS.get(c, '')}" for c in rep.detail_columns]
    return "\n".join(lines) + "\n"


def _map(fn, tasks, workers: int):
    """Ordered map over tasks, in-process for one worker."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


# -------------------------------------------------------------- xi paths


@nb.njit(cache=True)
def _path(state, steps, cdf, n):
    d = steps.shape[1]
    out = np.zeros((n + 1, d), dtype=np.int64)
    for i in range(1, n + 1):
        s = sample_cdf(state, cdf)
        for k in range(d):
            out[i, k] = out[i - 1, k] + steps[s, k]
    return out


def sample_path(xi: StepDist, n: int, rng) -> np.ndarray:
    """Positions xi_0 = 0, xi_1, ..., xi_n."""
    s = rng if isinstance(rng, Stream) else Stream(int(rng))
    return _path(s.state, xi.steps.astype(np.int64), np.asarray(xi.cdf), int(n))


def _normalise(d: int, n: int) -> float:
    if d >= 7:
        return 1.0 / n
    if d == 6:
        return math.log(n) / n
    return 1.0 / math.sqrt(n)


def d6_limit(sigma2: float) -> float:
    return 2 * math.pi**3 / (27 * sigma2)


# ------------------------------------------------------- range capacity


def _range_task(args):
    d, mu, theta, xi, n, w, seed, mc = args
    key = stream_key(seed, f"range-capacity:{n}", w)
    base = Stream(key)
    path = sample_path(xi, n, base.spawn(0))
    K = LatticeSet(path, d)
    est = capacity.bcap_escape(K, mu, theta, rng=base.spawn(1), **mc)
    f = _normalise(d, n)
    return {
        "n": n, "walk": w, "size": len(K), "bcap": est.value, "bcap_stderr": est.stderr,
        "statistic": est.value * f, "stat_stderr": est.stderr * f, "samples": est.samples,
        "escape_fraction": est.params["escape_fraction"],
        "truncated_fraction": est.truncated_fraction,
    }


def run_range_capacity(d: int, mu: OffspringDist | None = None, theta: StepDist | None = None,
                       xi_step: StepDist | None = None, n_grid=(250, 1000, 4000),
                       walks_per_n: int = 100, mc_params: dict | None = None, seed: int = 0,
                       workers: int = 1) -> ExperimentReport:
    """Bcap(xi[0,n]) for independent walks xi, normalised per dimension."""
    if d < 5:
        raise capacity.EstimatorError("range capacity experiments need d >= 5")
    mu = binary() if mu is None else mu
    theta = srw_step(d) if theta is None else theta
    xi_step = srw_step(d) if xi_step is None else xi_step
    mc = {"trials": 4000, "guard": 6}
    mc.update(mc_params or {})
    t0 = time.time()
    tasks = [(d, mu, theta, xi_step, int(n), w, seed, mc) for n in n_grid for w in range(walks_per_n)]
    detail = _map(_range_task, tasks, workers)
    rows = []
    for n in n_grid:
        st = np.array([r["statistic"] for r in detail if r["n"] == n])
        se = np.array([r["stat_stderr"] for r in detail if r["n"] == n])
        q25, med, q75 = np.percentile(st, [25, 50, 75])
        row = {
            "n": int(n), "walks": st.size, "median": med, "q25": q25, "q75": q75, "iqr": q75 - q25,
            "mean": st.mean(), "stderr": st.std(ddof=1) / math.sqrt(st.size) if st.size > 1 else 0.0,
            "pooled_stderr": math.sqrt(float(np.mean(se**2))),
            "samples": int(sum(r["samples"] for r in detail if r["n"] == n)),
        }
        if d == 6:
            row["ratio_to_limit"] = med / d6_limit(mu.sigma2)
        rows.append(row)
    cols = ["n", "walks", "median", "q25", "q75", "iqr", "mean", "stderr", "pooled_stderr", "samples"]
    if d == 6:
        cols.append("ratio_to_limit")
    dcols = ["n", "walk", "size", "bcap", "bcap_stderr", "statistic", "stat_stderr", "samples",
             "escape_fraction", "truncated_fraction"]
    return ExperimentReport(
        f"range-capacity-d{d}",
        {"d": d, "mu": mu.spec(), "theta": theta.spec(), "xi": xi_step.spec(),
         "n_grid": list(map(int, n_grid)), "walks_per_n": walks_per_n, "mc_params": mc},
        seed, cols, rows, dcols, detail, wall_clock=time.time() - t0,
        notes=["acceptance bands for finite n are artifact choices, not limits"])


# ------------------------------------------------------------ intersection


def _intersection_task(args):
    (mu, theta, xi, n, i, seed, x, eta, eps, trees_per_xi, use_filter, budget) = args
    base = Stream(stream_key(seed, f"intersection:{n}:{int(use_filter)}", i))
    path = sample_path(xi, n, base.spawn(0))
    d = path.shape[1]
    xn = np.floor(math.sqrt(n) * np.asarray(x, dtype=float)).astype(np.int32)
    inside = bool(np.sqrt((path.astype(float) ** 2).sum(axis=1)).max() <= eta * np.linalg.norm(xn))
    counts = np.zeros(len(eps), dtype=np.int64)
    out = {"inside": inside, "counts": counts, "hits": 0, "trunc": 0, "trees": trees_per_xi}
    if use_filter and not inside:
        return out
    A = LatticeSet(path, d)
    levels = tuple(NearIndex(A, e * math.sqrt(n)).fast_args() for e in eps)
    keys_t, used = A.table
    oq, oa = alias_table(mu.probs)
    sq, sa = alias_table(theta.probs)
    keys = stream_keys(base.spawn(1).key, "trees", trees_per_xi)
    st, best, _ = X.intersect_batch(keys, xn, oq, oa, theta.steps.astype(np.int32), sq, sa,
                                    keys_t, used, levels, budget)
    ok = st != X.HIT
    for j in range(len(eps)):
        counts[j] = int(np.count_nonzero(ok & (best <= j)))
    out["hits"] = int(np.count_nonzero(~ok))
    out["trunc"] = int(np.count_nonzero(st == X.TRUNCATED))
    return out


def run_intersection(d: int = 5, mu: OffspringDist | None = None, theta: StepDist | None = None,
                     xi_step: StepDist | None = None, x=None, eta: float = 0.9,
                     eps_grid=(0.05, 0.1, 0.2, 0.4), n_grid=(1000, 4000), xi_samples: int = 400,
                     trees_per_xi: int = 200, filter: bool = True, budget: int | None = None,
                     seed: int = 0, workers: int = 1) -> ExperimentReport:
    """n * I(eps, n): the range from x_n = floor(sqrt(n) x) meets the
    eps sqrt(n)-neighbourhood of xi[0,n] but not xi[0,n], on the event
    xi[0,n] in B(0, eta |x_n|) (dropped when ``filter`` is False).

    Each xi sample is reused for ``trees_per_xi`` trees; stderrs are computed
    over xi samples.  Trees are capped at ``budget`` vertices (default n^2).
    ``x`` defaults to the first unit vector.
    """
    mu = binary() if mu is None else mu
    theta = srw_step(d) if theta is None else theta
    xi_step = srw_step(d) if xi_step is None else xi_step
    x = np.eye(d)[0] if x is None else np.asarray(x, dtype=float)
    if x.shape != (d,) or not np.any(x):
        raise capacity.EstimatorError("x must be a nonzero point of R^d")
    if not 0 < eta < 1:
        raise capacity.EstimatorError("eta must lie in (0, 1)")
    eps = sorted(float(e) for e in eps_grid)
    if eps[0] <= 0:
        raise capacity.EstimatorError("eps values must be positive")
    t0 = time.time()
    rows = []
    for n in n_grid:
        cap = int(n) ** 2 if budget is None else int(budget)
        tasks = [(mu, theta, xi_step, int(n), i, seed, tuple(x), eta, tuple(eps), trees_per_xi,
                  filter, cap) for i in range(xi_samples)]
        res = _map(_intersection_task, tasks, workers)
        frac = np.array([r["counts"] / r["trees"] for r in res])  # (xi, eps)
        inside = np.mean([r["inside"] for r in res])
        ntrees = sum(r["trees"] for r in res if r["inside"] or not filter)
        trunc = sum(r["trunc"] for r in res)
        for j, e in enumerate(eps):
            f = frac[:, j]
            rows.append({
                "n": int(n), "eps": e, "filter": filter, "nI": n * f.mean(),
                "stderr": n * f.std(ddof=1) / math.sqrt(f.size), "samples": f.size * trees_per_xi,
                "trees": ntrees, "filter_rate": inside,
                "truncated_fraction": trunc / max(1, ntrees),
            })
    cols = ["n", "eps", "filter", "nI", "stderr", "samples", "trees", "filter_rate",
            "truncated_fraction"]
    return ExperimentReport(
        "intersection" if filter else "intersection-nofilter",
        {"d": d, "mu": mu.spec(), "theta": theta.spec(), "xi": xi_step.spec(), "x": x.tolist(),
         "eta": eta, "eps_grid": eps, "n_grid": list(map(int, n_grid)), "xi_samples": xi_samples,
         "trees_per_xi": trees_per_xi, "filter": filter, "budget": budget},
        seed, cols, rows, wall_clock=time.time() - t0)


# ---------------------------------------------------------- spine fraction


def run_spine_fraction(mu: OffspringDist | None = None, n_grid=(10, 50, 200, 1000),
                       samples: int = 10_000, r: float = 0.5, seed: int = 0) -> ExperimentReport:
    """Empirical P(#(spine vertices among the first n + 1 of hat T_-) > r n)."""
    mu = binary() if mu is None else mu
    t0 = time.time()
    rows = []
    for n in n_grid:
        cnt = trees.spine_count(mu, int(n), samples, seed, label=f"spine-fraction:{n}")
        k = int(np.count_nonzero(cnt > r * n))
        p = k / samples
        rows.append({"n": int(n), "r": r, "count": k, "samples": samples, "frequency": p,
                     "stderr": math.sqrt(p * (1 - p) / samples)})
    return ExperimentReport(
        "spine-fraction", {"mu": mu.spec(), "n_grid": list(map(int, n_grid)), "samples": samples,
                           "r": r},
        seed, ["n", "r", "count", "samples", "frequency", "stderr"], rows,
        wall_clock=time.time() - t0)


# --------------------------------------------------------------- identities


def run_identity_suite(mu: OffspringDist | None = None, theta: StepDist | None = None,
                       m_max: int = 8, dwass_max: int = 9, tol: float = 1e-12,
                       translation_samples: int = 2000, seed: int = 0) -> ExperimentReport:
    """Exact absolute-continuity and Dwass identities by enumeration, plus
    the translation-invariance KS check."""
    mu = binary() if mu is None else mu
    theta = srw_step(5) if theta is None else theta
    t0 = time.time()
    rows = []
    for m in range(1, m_max + 1):
        for k in range(1, m // 2 + 1):
            try:
                gap = trees.absolute_continuity_gap(mu, m, k)
            except trees.PeriodicityError:
                continue
            rows.append({"check": f"absolute-continuity m={m} k={k}", "value": gap,
                         "reference": 0.0, "error": gap, "pass": gap <= tol})
    for n in range(1, dwass_max + 1):
        lhs = _size_by_enumeration(mu, n)
        rhs = trees.walk_pmf(trees.lukasiewicz_step(mu), n, -1) / n
        err = abs(lhs - rhs)
        rows.append({"check": f"dwass n={n}", "value": lhs, "reference": rhs, "error": err,
                     "pass": err <= tol})
    ks, p = translation_check(theta, mu, 10, 50, translation_samples, seed=seed)
    rows.append({"check": "translation n=10 i_max=50", "value": p, "reference": 0.01,
                 "error": ks, "pass": p > 0.01})
    exact_ok = all(r["pass"] for r in rows if not r["check"].startswith("translation"))
    return ExperimentReport(
        "identities", {"mu": mu.spec(), "theta": theta.spec(), "m_max": m_max,
                       "dwass_max": dwass_max, "tol": tol,
                       "translation_samples": translation_samples},
        seed, ["check", "value", "reference", "error", "pass"], rows,
        wall_clock=time.time() - t0, passed=exact_ok and rows[-1]["pass"],
        notes=[] if exact_ok else ["exact identity failure"])


def _size_by_enumeration(mu: OffspringDist, n: int) -> float:
    """P(#T = n) summed over all plane trees with n vertices (finite support)."""
    return float(sum(p for _, p in trees.enumerate_trees(mu, n)))


# ---------------------------------------------------------------- c_theta


def c_theta(mu: OffspringDist, theta: StepDist) -> float:
    """2 / (sigma^2 c_g)."""
    return 2.0 / (mu.sigma2 * green_constant(theta.covariance))


def c_theta_closed(mu: OffspringDist, theta: StepDist) -> float:
    d = theta.d
    return 4 * math.pi ** (d / 2) * math.sqrt(theta.det_cov) / (mu.sigma2 * gamma_fn((d - 2) / 2))


def run_c_theta(mu: OffspringDist | None = None, theta: StepDist | None = None,
                seed: int = 0) -> ExperimentReport:
    mu = binary() if mu is None else mu
    theta = srw_step(5) if theta is None else theta
    d = theta.d
    a = c_theta(mu, theta)
    b = c_theta_closed(mu, theta)
    rows = [{"check": "2/(sigma^2 c_g) vs closed form", "value": a, "reference": b,
             "error": abs(a - b), "pass": abs(a - b) <= 1e-12 * max(1.0, abs(b))}]
    if theta.name == "srw" and theta.params[1] == 0:
        srw = 4 * math.pi ** (d / 2) / (mu.sigma2 * d ** (d / 2) * gamma_fn((d - 2) / 2))
        rows.append({"check": "simple walk form 4 pi^{d/2}/(sigma^2 d^{d/2} Gamma((d-2)/2))",
                     "value": a, "reference": srw, "error": abs(a - srw),
                     "pass": abs(a - srw) <= 1e-12 * srw})
        if d == 5:
            ref = 8 * math.pi**2 / (mu.sigma2 * d ** (d / 2))
            rows.append({"check": "d=5 simple walk form 8 pi^2/(sigma^2 d^{d/2})", "value": a,
                         "reference": ref, "error": abs(a - ref),
                         "pass": abs(a - ref) <= 1e-12 * ref})
    return ExperimentReport(
        "c-theta", {"mu": mu.spec(), "theta": theta.spec()}, seed,
        ["check", "value", "reference", "error", "pass"], rows,
        passed=all(r["pass"] for r in rows))
