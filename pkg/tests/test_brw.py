import math

import numpy as np
import pytest
from scipy import stats

from bcaplab.brw import (
    TreeWalk, increment_stat, realize, realize_t_plus, spine_decompose, translation_check,
    walk_range,
)
from bcaplab.distributions import binary, srw_step
from bcaplab.rng import Stream, stream_key
from bcaplab.trees import (
    PlanarTree, sample_gw, sample_gw_conditioned, sample_hat_t_minus, sample_t_plus,
)

BIN = binary()
SRW2 = srw_step(2)
SRW5 = srw_step(5)


def _s(seed, i=0):
    return Stream(stream_key(seed, "test-brw", i))


def _step_index(theta):
    return {tuple(z): i for i, z in enumerate(theta.steps.tolist())}


def test_single_vertex():
    w = realize(PlanarTree([0]), SRW5, [3, 1, 4, 1, 5], _s(1))
    assert w.positions.tolist() == [[3, 1, 4, 1, 5]]
    assert walk_range(w) == w.range() and len(w.range()) == 1


def test_positions_are_parent_plus_step():
    t = sample_gw_conditioned(BIN, 2001, _s(2))
    w = realize(t, SRW5, [7, 0, 0, 0, 0], _s(3))
    assert np.array_equal(w.positions[0], [7, 0, 0, 0, 0])
    inc = w.increments()
    assert np.array_equal(w.positions[1:], w.positions[w.parent[1:]] + inc)
    idx = _step_index(SRW5)
    assert all(tuple(z) in idx for z in inc.tolist())
    assert len(w.range()) <= w.n


def test_edge_increments_follow_theta():
    idx = _step_index(SRW5)
    counts = np.zeros(len(idx))
    edges = 0
    i = 0
    while edges < 10**5:
        w = realize(sample_gw_conditioned(BIN, 1001, _s(4, i)), SRW5, None, _s(5, i))
        for z in w.increments().tolist():
            counts[idx[tuple(z)]] += 1
        edges += w.n - 1
        i += 1
    assert stats.chisquare(counts, SRW5.probs * counts.sum()).pvalue > 0.01


def test_path_tree_endpoint_law():
    n = 4
    path = PlanarTree([1] * n + [0])
    # exact law of the n-step endpoint by convolution on a grid
    grid = np.zeros((2 * n + 1, 2 * n + 1))
    grid[n, n] = 1.0
    for _ in range(n):
        nxt = np.zeros_like(grid)
        for z, p in zip(SRW2.steps.tolist(), SRW2.probs):
            nxt += p * np.roll(grid, shift=tuple(z), axis=(0, 1))
        grid = nxt
    obs = np.zeros_like(grid)
    m = 20000
    for i in range(m):
        e = realize(path, SRW2, None, _s(6, i)).positions[-1]
        obs[e[0] + n, e[1] + n] += 1
    keep = grid > 0
    assert obs[~keep].sum() == 0
    assert stats.chisquare(obs[keep], grid[keep] * m).pvalue > 0.01


def test_truncated_tree_marker_propagates():
    t = sample_gw(BIN, _s(7), max_vertices=5)
    for i in range(100):
        t = sample_gw(BIN, _s(7, i), max_vertices=5)
        if not isinstance(t, PlanarTree):
            break
    w = realize(t, SRW5, None, _s(8))
    assert w.truncated and w.n == t.consumed


def test_tree_walk_bytes_round_trip():
    t = sample_gw_conditioned(BIN, 51, _s(9))
    w = realize(t, SRW5, None, _s(10))
    back = TreeWalk.from_bytes(w.to_bytes(), SRW5)
    assert back.tree == t and np.array_equal(back.positions, w.positions)
    assert w.to_bytes() == realize(t, SRW5, None, _s(10)).to_bytes()


def test_symmetric_theta_centred_vertex():
    ends = []
    for i in range(4000):
        w = realize(sample_gw_conditioned(BIN, 101, _s(11, i)), SRW5, None, _s(12, i))
        ends.append(w.positions[i % w.n])
    ends = np.array(ends, dtype=float)
    se = ends.std(axis=0) / math.sqrt(len(ends))
    assert np.all(np.abs(ends.mean(axis=0)) < 4 * se)


def _max_norms(m, samples, seed):
    out = np.empty(samples)
    for i in range(samples):
        w = realize(sample_gw_conditioned(BIN, m, _s(seed, i)), SRW5, None, _s(seed + 1, i))
        out[i] = np.sqrt((w.positions.astype(float) ** 2).sum(axis=1)).max()
    return out


@pytest.mark.slow
def test_conditioned_range_radius_scaling():
    ms = [1001, 4001, 16001]
    data = [_max_norms(m, 300, 13 + 2 * j) for j, m in enumerate(ms)]
    slope = np.polyfit(np.log(ms), np.log([d.mean() for d in data]), 1)[0]
    assert abs(slope - 0.25) < 0.05
    ratios = [np.mean(d**4) / m for d, m in zip(data, ms)]
    assert max(ratios) / min(ratios) <= 2.5


# ---------------------------------------------------------- spine prefixes


def test_spine_decompose_trivial_prefix():
    p = sample_hat_t_minus(BIN, 0, _s(20))
    w = realize(p, SRW5, [1, 2, 3, 4, 5], _s(21))
    sd = spine_decompose(w)
    assert sd.spine_positions.tolist() == [[1, 2, 3, 4, 5]]
    assert sd.bush_positions.tolist() == [[1, 2, 3, 4, 5]]


def test_spine_decompose_partition_and_steps():
    idx = _step_index(SRW5)
    counts = np.zeros(len(idx))
    for i in range(300):
        p = sample_hat_t_minus(BIN, 400, _s(22, i))
        w = realize(p, SRW5, None, _s(23, i))
        sd = spine_decompose(w)
        assert sd.spine_range.union(sd.bush_range) == w.range()
        assert len(sd.spine_positions) + len(sd.bush_positions) == w.n + 1
        for z in np.diff(sd.spine_positions, axis=0).tolist():
            counts[idx[tuple(z)]] += 1
    assert counts.sum() > 1000
    assert stats.chisquare(counts, SRW5.probs * counts.sum()).pvalue > 0.01


def test_spine_decompose_needs_prefix():
    w = realize(PlanarTree([0]), SRW5, None, _s(24))
    with pytest.raises(TypeError):
        spine_decompose(w)


# ------------------------------------------------------- T_+ statistics


def test_increment_stat_bounds():
    pos = realize_t_plus(sample_t_plus(BIN, 2000, _s(25)), SRW5, None, _s(26))
    disp = np.sqrt(((pos - pos[0]).astype(float) ** 2).sum(axis=1))
    full, _ = increment_stat(pos, 1.0)
    assert full == disp.max()
    for eta in (0.5, 0.1, 0.01):
        stat, blocks = increment_stat(pos, eta)
        assert stat <= 2 * disp.max() + 1e-12
        assert len(blocks) <= int(1 / eta) + 1
    with pytest.raises(ValueError):
        increment_stat(pos, 0.0)


def test_increment_stat_tail_decreasing():
    n = 10**4
    vals = np.empty(1000)
    for i in range(1000):
        pos = realize_t_plus(sample_t_plus(BIN, n, _s(27, i)), SRW5, None, _s(28, i))
        vals[i] = increment_stat(pos, 0.1)[0]
    tail = [(vals >= r * n**0.25).mean() for r in (1, 2, 4)]
    assert tail[0] >= tail[1] >= tail[2]


def test_translation_invariance_endpoint():
    _, p = translation_check(SRW5, BIN, 10, 50, 10**4, seed=1)
    assert p > 0.01


def test_translation_invariance_range():
    _, p = translation_check(SRW5, BIN, 10, 50, 3000, seed=2, functional="range")
    assert p > 0.01


def test_translation_zero_shift():
    d, p = translation_check(SRW5, BIN, 0, 20, 2000, seed=3)
    assert d < 0.06
