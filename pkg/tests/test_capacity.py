import math
import warnings

import numpy as np
import pytest
from scipy import stats

from bcaplab.capacity import (
    CapacityEstimate, EstimatorError, LowStatisticsWarning, NonPSDKernel, NumericalError,
    _far_points, bcap_escape, bcap_hitting, bscap_surrogate, closure_solve, default_kappa,
    exit_pairs, extrapolate, far_directions, green_for, newtonian_cap, riesz_cap,
)
from bcaplab.distributions import srw_step
from bcaplab.experiments import sample_path
from bcaplab.lattice import LatticeSet, ball
from bcaplab.rng import Stream, as_stream, stream_keys

SRW5 = srw_step(5)
O5 = LatticeSet(np.zeros((1, 5), dtype=np.int64), 5)


def _pooled(a, b):
    return math.hypot(a.stderr, b.stderr)


# ------------------------------------------------------------- records


def test_estimate_validation_and_json():
    with pytest.raises(NumericalError):
        CapacityEstimate("x", "K", 1.0, -1.0, 10)
    with pytest.raises(NumericalError):
        CapacityEstimate("x", "K", 1.0, 0.1, 10, truncated_fraction=1.5)
    e = CapacityEstimate("x", "K", 1.0, 0.1, 10, params={"a": np.float64(2.0)}, batches=[[1.0]])
    assert '"value": 1.0' in e.to_json() and e.to_dict()["params"]["a"] == 2.0


def test_extrapolate_exact():
    rhos = np.array([8.0, 12.0, 16.0])
    a, se, b = extrapolate(rhos, 3.0 + 5.0 / rhos, [0.1, 0.1, 0.1])
    assert abs(a - 3.0) < 1e-12 and abs(b - 5.0) < 1e-10 and se > 0.1
    assert extrapolate([8.0], [2.0], [0.5]) == (2.0, 0.5, 0.0)


def test_far_directions():
    dirs = far_directions(5, 8, 1)
    assert dirs.shape == (18, 5)
    assert np.allclose(np.linalg.norm(dirs, axis=1), 1.0)
    assert np.array_equal(dirs, far_directions(5, 8, 1))


def test_exit_pairs_singleton():
    p = exit_pairs(O5, SRW5)
    assert abs(p.total - 1.0) < 1e-12 and p.exposed == 1
    q = exit_pairs(ball(5, 1), SRW5)
    # every unit neighbour has 9 exits out of 10 steps
    assert abs(q.total - 10 * 0.9) < 1e-12


def test_closure_without_exposure_is_raw():
    esc = np.array([1, 0, 1, 1, 0, 1], dtype=bool)
    B, se = closure_solve(2.0, esc, np.zeros(esc.size))
    assert abs(B - 2.0 * esc.mean()) < 1e-10 and se > 0
    B2, _ = closure_solve(2.0, esc, np.full(esc.size, 0.5))
    assert B2 < B and abs(B2 - 2.0 * esc.mean() * math.exp(-0.5 * B2)) < 1e-9


# ----------------------------------------------------------- Newtonian


def test_newtonian_point_matches_green(tmp_path):
    rng = 21
    e = newtonian_cap(O5, SRW5, far_distances=[4.0], trials=300_000, rng=rng, guard_factor=4)
    g = green_for(SRW5)
    dirs = far_directions(5, 8, stream_keys(as_stream(rng).key, "newton:directions", 1)[0].item())
    _, offs = _far_points(O5, 4.0, dirs)
    expect = np.mean([g(o) * np.linalg.norm(o) ** 3 for o in offs]) / g.g0
    assert abs(e.value - expect) <= 3 * e.stderr
    assert e.stderr < 0.1 * expect
    # the far-point value approaches the limit c'/g(0)
    limit = 0.1266 / g.g0
    _, offs5 = _far_points(O5, 5.0, dirs)
    at5 = np.mean([g(o) * np.linalg.norm(o) ** 3 for o in offs5]) / g.g0
    assert abs(at5 - limit) < 0.1 * limit


def test_newtonian_monotone_and_translation():
    kw = dict(far_distances=[8.0, 12.0], trials=60_000, guard_factor=4)
    a = newtonian_cap(ball(5, 1), rng=1, **kw)
    b = newtonian_cap(ball(5, 2), rng=2, **kw)
    assert a.value <= b.value + 3 * (a.stderr + b.stderr)
    c = newtonian_cap(ball(5, 1).translate([7, -3, 0, 2, 1]), rng=3, **kw)
    assert abs(a.value - c.value) <= 3 * _pooled(a, c)


def test_newtonian_rejects_near_points():
    with pytest.raises(EstimatorError):
        newtonian_cap(ball(5, 2), far_distances=[3.0])
    with pytest.raises(EstimatorError):
        newtonian_cap(LatticeSet(np.zeros((1, 2), dtype=np.int64), 2))


def test_batch_variance_consistent():
    e = newtonian_cap(O5, SRW5, far_distances=[4.0], trials=200_000, rng=5, guard_factor=4,
                      n_batches=20)
    b = np.array(e.batches[0])
    row = e.per_distance[0]
    p = row["hits"] / row["trials"]
    scale = row["value"] / p
    per_batch = row["trials"] / b.size
    expected = scale**2 * p * (1 - p) / per_batch
    ratio = b.var(ddof=1) / expected
    lo, hi = stats.chi2.ppf([0.025, 0.975], b.size - 1) / (b.size - 1)
    assert lo <= ratio <= hi


# ------------------------------------------------------------ branching


def test_bcap_hitting_point_positive():
    e = bcap_hitting(O5, far_distances=[8.0], trials=150_000, rng=3)
    assert 0 < e.value < 5 and e.truncated_fraction == 0.0
    assert e.params["green"]["box_radius"] == 24


def test_bcap_hitting_zero_hits_warns():
    with pytest.warns(LowStatisticsWarning):
        e = bcap_hitting(O5, far_distances=[30.0], trials=36, rng=4, directions=0)
    assert e.value == 0.0 and e.stderr > 0 and e.warnings


def test_bcap_hitting_preconditions():
    with pytest.raises(EstimatorError):
        bcap_hitting(ball(5, 2), far_distances=[5.0])
    with pytest.raises(EstimatorError):
        bcap_hitting(LatticeSet(np.zeros((1, 4), dtype=np.int64), 4))


def test_bcap_hitting_budget_truncation_reported():
    e = bcap_hitting(O5, far_distances=[8.0], trials=2000, budget=50, rng=6)
    assert e.truncated_fraction > 0.05 and any("truncated" in w for w in e.warnings)


def test_bcap_escape_point_precision():
    e = bcap_escape(O5, trials=100_000, rng=7)
    assert e.value > 0 and e.stderr / e.value < 0.05
    assert e.params["raw_value"] >= e.value
    again = bcap_escape(O5, trials=2000, rng=8)
    assert again.value == bcap_escape(O5, trials=2000, rng=8).value


def test_bcap_escape_agrees_with_hitting_for_point():
    esc = bcap_escape(O5, trials=20_000, rng=9)
    hit = bcap_hitting(O5, far_distances=[8.0], trials=400_000, rng=10)
    assert abs(esc.value - hit.value) <= 3 * _pooled(esc, hit)


def test_bcap_escape_subadditive_and_monotone():
    K1 = ball(5, 1)
    K2 = ball(5, 1).translate([3, 0, 0, 0, 0])
    b1 = bcap_escape(K1, trials=10_000, rng=11)
    b2 = bcap_escape(K2, trials=10_000, rng=12)
    bu = bcap_escape(K1.union(K2), trials=10_000, rng=13)
    assert bu.value <= b1.value + b2.value + 3 * math.sqrt(b1.stderr**2 + b2.stderr**2 + bu.stderr**2)
    assert bu.value >= b1.value - 3 * _pooled(bu, b1)
    b0 = bcap_escape(O5, trials=10_000, rng=14)
    assert b0.value <= b1.value + 3 * _pooled(b0, b1)


def test_bcap_escape_translation_invariant():
    a = bcap_escape(ball(5, 1), trials=10_000, rng=15)
    b = bcap_escape(ball(5, 1).translate([100, -40, 3, 0, 9]), trials=10_000, rng=16)
    assert abs(a.value - b.value) <= 3 * _pooled(a, b)


def test_bcap_escape_guard_stability():
    # the far-field closure makes the estimate insensitive to the guard width
    a = bcap_escape(ball(5, 2), trials=10_000, rng=17, guard=8)
    b = bcap_escape(ball(5, 2), trials=10_000, rng=18, guard=14)
    assert abs(a.value - b.value) <= 3 * _pooled(a, b)
    assert b.params["raw_value"] < a.params["raw_value"]


def test_bcap_escape_preconditions():
    with pytest.raises(EstimatorError):
        bcap_escape(LatticeSet(np.zeros((0, 5)), 5))
    with pytest.raises(EstimatorError):
        bcap_escape(LatticeSet(np.zeros((1, 4), dtype=np.int64), 4))


# ---------------------------------------------------------------- Riesz


def _cloud(n=200, d=3, seed=1):
    return Stream.from_seed(seed).numpy().normal(size=(n, d))


def test_riesz_homogeneity():
    pts = _cloud()
    for gamma in (0.5, 1.0, 2.0):
        a = riesz_cap(pts, gamma, tol=1e-10, kappa=4.0)
        b = riesz_cap(2 * pts, gamma, tol=1e-10, kappa=4.0)
        assert abs(b.capacity / a.capacity - 2**gamma) < 0.01 * 2**gamma


def test_riesz_two_points_closed_form():
    R, gamma = 3.0, 1.0
    pts = np.array([[0, 0, 0, 0, 0], [R, 0, 0, 0, 0]], dtype=float)
    sol = riesz_cap(pts, gamma, kappa=2.0, h=R)
    assert np.allclose(sol.weights, 0.5, atol=1e-10)
    D = 2.0 * R**-gamma
    assert abs(sol.energy - (D + R**-gamma) / 2) < 1e-10
    assert abs(sol.interaction_energy - R**-gamma / 2) < 1e-10


def test_riesz_unloaded_kernel_rejected():
    pts = np.array([[0.0] * 5, [3.0] + [0.0] * 4])
    with pytest.raises(NonPSDKernel, match="kappa"):
        riesz_cap(pts, 1.0, kappa=0.0)


def test_riesz_preconditions():
    pts = _cloud(10, 3)
    with pytest.raises(EstimatorError):
        riesz_cap(pts, 3.0)
    with pytest.raises(EstimatorError):
        riesz_cap(pts[:1], 1.0)
    with pytest.raises(EstimatorError):
        riesz_cap(np.vstack([pts, pts[:1]]), 1.0)


def test_riesz_solver_invariants():
    sol = riesz_cap(_cloud(150, 4, 3), 1.5, tol=1e-9)
    w = sol.weights
    assert np.all(w >= -1e-14) and abs(w.sum() - 1) <= 1e-10
    assert np.all(np.diff(sol.energies) <= 1e-15 * sol.energies[0])
    assert sol.converged and sol.gap <= 1e-9 * sol.energy
    assert abs(sol.capacity * sol.energy - 1) < 1e-12


def test_default_kappa():
    assert default_kappa(1.0) == 2.0
    assert default_kappa(2.0) == 4.0


def _segment(m, d=5):
    pts = np.zeros((m + 1, d))
    pts[:, 0] = np.linspace(0, 1, m + 1)
    return pts


def test_riesz_segment_log_decay():
    # gamma equals the segment's dimension: capacity ~ c / log(1/h)
    caps = [riesz_cap(_segment(m), 1.0).capacity for m in (50, 100, 200)]
    assert caps[0] > caps[1] > caps[2] > 0
    scaled = [c * math.log(m) for c, m in zip(caps, (50, 100, 200))]
    assert max(scaled) / min(scaled) < 1.05


def _path_cloud(d, n, seed=4):
    xi = srw_step(d)
    pts = sample_path(xi, n, Stream.from_seed(seed)).astype(float)
    pts = np.unique(pts, axis=0)
    return pts / math.sqrt(n)


def test_bscap_surrogate_trends():
    five = [bscap_surrogate(_path_cloud(5, n), 5).value for n in (250, 1000)]
    six = [bscap_surrogate(_path_cloud(6, n), 6).value for n in (250, 1000)]
    assert six[1] < 0.9 * six[0]
    assert abs(five[1] / five[0] - 1) < 0.1
    s = bscap_surrogate(_path_cloud(5, 100), 5)
    assert s.gamma == 1.0 and "surrogate" in s.label
    lo, hi = s.interval(0.5, 2.0)
    assert lo == 0.5 * s.value and hi == 2.0 * s.value
    with pytest.raises(EstimatorError):
        bscap_surrogate(_path_cloud(5, 100), 4)
