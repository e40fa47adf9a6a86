import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bcaplab.distributions import box_step, srw_step
from bcaplab.lattice import (
    LatticeSet, NearIndex, ThetaNorm, ball, green_asymptotic, green_constant,
    green_self_convolution_constant, green_solve, min_dist, neighborhood, norm_theta, open_ball,
)
from bcaplab.rng import Stream

SRW5 = srw_step(5)


@pytest.fixture(scope="module")
def g24():
    return green_solve(SRW5, 24)


def _cloud(seed, n, d, span):
    rng = Stream.from_seed(seed).numpy()
    return LatticeSet(rng.integers(-span, span + 1, size=(n, d)), d)


# ----------------------------------------------------------------- sets


@given(st.integers(0, 10**6), st.integers(1, 60), st.integers(1, 5))
@settings(max_examples=40, deadline=None)
def test_membership_matches_linear_scan(seed, n, d):
    A = _cloud(seed, n, d, 4)
    probes = Stream.from_seed(seed + 1).numpy().integers(-5, 6, size=(200, d))
    pts = {tuple(p) for p in A.points.tolist()}
    expect = np.array([tuple(p) in pts for p in probes.tolist()])
    assert np.array_equal(A.contains_many(probes), expect)
    assert all((tuple(p) in A) == e for p, e in zip(probes[:20], expect[:20]))


def test_set_is_sorted_unique():
    A = LatticeSet([[1, 0], [0, 0], [1, 0]], 2)
    assert len(A) == 2 and A.points.tolist() == [[0, 0], [1, 0]]


def test_binary_and_csv_round_trip():
    A = _cloud(3, 50, 5, 20)
    assert LatticeSet.from_bytes(A.to_bytes()) == A
    assert LatticeSet.from_csv(A.to_csv(), 5) == A
    raw = A.to_bytes()
    d, count = np.frombuffer(raw[:8], dtype="<u4")
    assert (d, count) == (5, 50) and len(raw) == 8 + 4 * 5 * 50


def test_translate_union_subset():
    A = ball(3, 1)
    B = A.translate([5, 0, 0])
    U = A.union(B)
    assert len(U) == 2 * len(A) and A.issubset(U) and not U.issubset(A)


def test_ball_counts():
    assert len(ball(5, 1)) == 11
    assert len(open_ball(5, 1)) == 1
    assert len(ball(2, 2)) == 13


def test_neighborhood_examples():
    A = LatticeSet(np.zeros((1, 5), dtype=np.int64), 5)
    assert neighborhood(A, 0) == A
    assert len(neighborhood(A, 1)) == 11


@given(st.integers(0, 10**6), st.floats(0.0, 2.5), st.floats(0.0, 2.5))
@settings(max_examples=30, deadline=None)
def test_neighborhood_monotone(seed, r1, r2):
    A = _cloud(seed, 8, 3, 6)
    lo, hi = sorted((r1, r2))
    N1, N2 = neighborhood(A, lo), neighborhood(A, hi)
    assert A.issubset(N1) and N1.issubset(N2)


def test_neighborhood_composition_containment():
    # the triangle inequality gives N(N(A, r), s) inside N(A, r + s)
    A = _cloud(5, 6, 3, 5)
    for r, s in ((1, 1), (1, 2), (2, 1)):
        assert neighborhood(neighborhood(A, r), s).issubset(neighborhood(A, r + s))


def test_neighborhood_composition_is_strict_on_lattice():
    # (1,1,1) is within 2 of the origin but farther than 1 from every unit vector
    O = LatticeSet(np.zeros((1, 3), dtype=np.int64), 3)
    two_step = neighborhood(neighborhood(O, 1), 1)
    assert (1, 1, 1) in neighborhood(O, 2) and (1, 1, 1) not in two_step


def test_neighborhood_memory_guard():
    with pytest.raises(MemoryError):
        neighborhood(ball(5, 3), 10, max_points=10**5)


def test_min_dist_examples_and_scan():
    A = LatticeSet(np.zeros((1, 5), dtype=np.int64), 5)
    assert min_dist([3, 4, 0, 0, 0], A) == 5.0
    assert min_dist([0, 0, 0, 0, 0], A) == 0.0
    B = _cloud(7, 300, 5, 30)
    probes = Stream.from_seed(8).numpy().integers(-60, 61, size=(1000, 5))
    for p in probes:
        brute = np.sqrt(((B.points - p) ** 2).sum(axis=1)).min()
        assert abs(min_dist(p, B) - brute) < 1e-12
    with pytest.raises(ValueError):
        min_dist([0] * 5, LatticeSet(np.zeros((0, 5)), 5))


def test_near_index_matches_min_dist():
    B = _cloud(9, 200, 5, 25)
    probes = Stream.from_seed(10).numpy().integers(-40, 41, size=(1000, 5))
    for r in (1.5, 4.0, 9.0):
        idx = NearIndex(B, r)
        for p in probes:
            assert idx.near(p) == (min_dist(p, B) <= r)


# ----------------------------------------------------------------- norms


def test_norm_theta_examples():
    M = SRW5.covariance
    assert abs(norm_theta([1, 0, 0, 0, 0], M) - math.sqrt(5)) < 1e-12
    assert norm_theta([0] * 5, M) == 0.0
    assert abs(norm_theta([3, 4, 0, 0, 0], np.eye(5)) - 5.0) < 1e-12
    with pytest.raises(ValueError):
        ThetaNorm(np.zeros((3, 3)))


def test_green_constants():
    cg = green_constant(SRW5.covariance)
    assert abs(cg * 5 ** -1.5 - 5 * math.gamma(1.5) / (2 * math.pi**2.5)) < 1e-14
    assert abs(cg * 5 ** -1.5 - 0.1266) < 5e-4
    assert green_self_convolution_constant(SRW5.covariance) > 0


# ----------------------------------------------------------------- Green


def test_green_basic_properties(g24):
    assert g24.g0 > 1
    for x in ([1, 2, 0, 0, 3], [4, -1, 2, 0, 0]):
        assert g24(x) == g24(-np.asarray(x))
    assert g24.residual < 1e-8


def test_green_harmonicity(g24):
    rng = Stream.from_seed(11).numpy()
    steps, probs = SRW5.steps, SRW5.probs
    for _ in range(200):
        x = rng.integers(-20, 21, size=5)
        lhs = g24(x)
        rhs = float(np.all(x == 0)) + sum(p * g24(x - z) for z, p in zip(steps, probs))
        assert abs(lhs - rhs) < 1e-8


def test_green_asymptotics(g24):
    cg = green_constant(SRW5.covariance)
    M = SRW5.covariance
    rng = Stream.from_seed(12).numpy()
    for _ in range(200):
        v = rng.normal(size=5)
        x = np.rint(v / np.linalg.norm(v) * rng.uniform(10, 20)).astype(np.int64)
        if not 10 <= np.linalg.norm(x) <= 20:
            continue
        ratio = g24(x) * norm_theta(x, M) ** 3 / cg
        assert abs(ratio - 1) < 0.10
    x = np.array([15, 0, 0, 0, 0])
    assert abs(g24(x) * 15**3 - 0.1266) < 0.1 * 0.1266


def test_green_return_probability_mc(g24):
    # P(return to 0) = 1 - 1/g(0); walks cut at 2000 steps lose ~1e-4 of mass
    from bcaplab import _explore as X
    from bcaplab.rng import alias_table, stream_keys

    sq, sa = alias_table(SRW5.probs)
    keys = stream_keys(13, "green-return", 200_000)
    K = LatticeSet(np.zeros((1, 5), dtype=np.int64), 5)
    hk, hu = K.table
    x = np.array([1, 0, 0, 0, 0], dtype=np.int32)
    st_ = X.walk_hit_batch(keys, x, SRW5.steps.astype(np.int32), sq, sa, hk, hu,
                           np.zeros(5), 1e-6, 1e12, 2000)
    p = (st_ == X.HIT).mean()
    # from a neighbour, P(hit 0) = g(e1)/g(0) = 1 - 1/g(0)
    q = 1 - 1 / g24.g0
    assert abs(p - q) < 3 * math.sqrt(q * (1 - q) / keys.size) + 2e-3


def test_green_boundary_control(g24):
    g12 = green_solve(SRW5, 12)
    for x in ([0] * 5, [3, 0, 0, 0, 0], [2, 2, 1, 0, 0], [6, 0, 0, 0, 0]):
        assert abs(g12(x) / g24(x) - 1) < 0.01


def test_green_nonreduced_box_step():
    th = box_step(3, 1)
    g = green_solve(th, 8)
    assert g.g0 > 1 and g.residual < 1e-8


def test_green_rejects_recurrent():
    with pytest.raises(ValueError):
        green_solve(srw_step(2), 8)


def test_green_asymptotic_at_origin_is_inf():
    assert green_asymptotic(np.zeros(5), SRW5.covariance) == np.inf
