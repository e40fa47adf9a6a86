"""numba kernels for hitting / escape trials of branching random walks.

All kernels take a target set K as a hash table plus a bounding sphere
(center ``c``, squared radius ``rk2``) so that most vertices are rejected
by one distance computation.  Vertices farther than ``sqrt(guard2)`` from
``c`` are frozen: their descendants are not explored.

Laws are passed as Walker alias tables (threshold, alias): ``oq, oa`` for
the offspring law, ``sq, sa`` for the step law, ``aq, aa`` for the adjoint law.
"""

import numba as nb
import numpy as np

from ._hashset import table_contains
from .lattice import near_query_fast
from .rng import alias_draw, sample_cdf

HIT = 0
MISS = 1
TRUNCATED = 2
GROW = 3


@nb.njit(cache=True, inline="always")
def _dist2(p, c):
    acc = 0.0
    for k in range(p.shape[0]):
        t = p[k] - c[k]
        acc += t * t
    return acc


@nb.njit(cache=True, inline="always")
def _qform(p, c, minv):
    """(p - c)^T M^{-1} (p - c)."""
    d = p.shape[0]
    acc = 0.0
    for a in range(d):
        ta = p[a] - c[a]
        for b in range(d):
            acc += ta * minv[a, b] * (p[b] - c[b])
    return acc


@nb.njit(cache=True)
def _double(stack):
    new = np.empty((stack.shape[0] * 2, stack.shape[1]), dtype=stack.dtype)
    new[: stack.shape[0]] = stack
    return new


@nb.njit(cache=True)
def _explore_fixed(state, stack, top, n, oq, oa, kmax, steps, sq, sa,
                   keys, used, c, rk2, guard2, budget, minv, expo, coef):
    """Inner loop of ``explore`` on a stack that is never reallocated;
    returns GROW (with the current vertex pushed back) when it may overflow."""
    d = steps.shape[1]
    p = np.empty(d, dtype=np.int32)
    far = 0.0
    cap = stack.shape[0]
    while top >= 0:
        for k in range(d):
            p[k] = stack[top, k]
        if top + kmax >= cap:
            return GROW, top, n, far
        top -= 1
        n += 1
        if n > budget:
            return TRUNCATED, top, n, far
        r2 = 0.0
        for k in range(d):
            t = p[k] - c[k]
            r2 += t * t
        if r2 <= rk2 and table_contains(keys, used, p):
            return HIT, top, n, far
        if r2 > guard2:
            if coef != 0.0:
                far += coef * _qform(p, c, minv) ** expo
            continue
        nc = alias_draw(state, oq, oa)
        for _ in range(nc):
            s = alias_draw(state, sq, sa)
            top += 1
            for k in range(d):
                stack[top, k] = p[k] + steps[s, k]
    return MISS, top, n, far


@nb.njit(cache=True)
def explore(state, stack, top, n, oq, oa, steps, sq, sa,
            keys, used, c, rk2, guard2, budget, minv, d_exp, coef):
    """Depth-first exploration of the GW forest whose pending roots are
    ``stack[0..top]``.

    Stops at the first vertex in K.  Vertices beyond the guard are frozen
    and add ``coef * |v - c|_theta^(2 - d)`` to the far-field sum.
    Returns (status, n, far, stack).
    """
    kmax = oq.shape[0]
    expo = 0.5 * (2.0 - d_exp)
    far = 0.0
    while True:
        st, top, n, f = _explore_fixed(state, stack, top, n, oq, oa, kmax, steps, sq, sa,
                                       keys, used, c, rk2, guard2, budget, minv, expo, coef)
        far += f
        if st != GROW:
            return st, n, far, stack
        stack = _double(stack)


@nb.njit(cache=True)
def hit_batch(keys_rng, x, oq, oa, steps, sq, sa, keys, used, c, rk2, guard2, budget):
    """Independent GW trees from x.  status: HIT / MISS / TRUNCATED."""
    m = keys_rng.shape[0]
    d = steps.shape[1]
    status = np.empty(m, dtype=np.int8)
    sizes = np.empty(m, dtype=np.int64)
    state = np.zeros(1, dtype=np.uint64)
    stack = np.empty((4096, d), dtype=np.int32)
    minv = np.eye(d)
    for t in range(m):
        state[0] = keys_rng[t]
        for k in range(d):
            stack[0, k] = x[k]
        st, n, _, stack = explore(state, stack, 0, 0, oq, oa, steps, sq, sa,
                                  keys, used, c, rk2, guard2, budget, minv, float(d), 0.0)
        status[t] = st
        sizes[t] = n
    return status, sizes


@nb.njit(cache=True, inline="always")
def _in_guard(p, cell, gkeys, gused, side):
    for k in range(p.shape[0]):
        cell[k] = p[k] // side
    return table_contains(gkeys, gused, cell)


@nb.njit(cache=True)
def _potential(p, cpts, cw, minv, expo):
    """sum_c cw[c] * |p - cpts[c]|_theta^(2 expo)."""
    acc = 0.0
    for j in range(cpts.shape[0]):
        acc += cw[j] * _qform(p, cpts[j], minv) ** expo
    return acc


@nb.njit(cache=True)
def _explore_cells(state, stack, top, n, oq, oa, kmax, steps, sq, sa, keys, used, c, rk2,
                   gkeys, gused, side, budget, cpts, cw, minv, expo):
    """As ``_explore_fixed`` but the guard is a set of cells of side ``side``
    and a frozen vertex adds the cluster potential of K."""
    d = steps.shape[1]
    p = np.empty(d, dtype=np.int32)
    cell = np.empty(d, dtype=np.int32)
    far = 0.0
    cap = stack.shape[0]
    while top >= 0:
        for k in range(d):
            p[k] = stack[top, k]
        if top + kmax >= cap:
            return GROW, top, n, far
        top -= 1
        n += 1
        if n > budget:
            return TRUNCATED, top, n, far
        if _dist2(p, c) <= rk2 and table_contains(keys, used, p):
            return HIT, top, n, far
        if not _in_guard(p, cell, gkeys, gused, side):
            far += _potential(p, cpts, cw, minv, expo)
            continue
        nc = alias_draw(state, oq, oa)
        for _ in range(nc):
            s = alias_draw(state, sq, sa)
            top += 1
            for k in range(d):
                stack[top, k] = p[k] + steps[s, k]
    return MISS, top, n, far


@nb.njit(cache=True)
def escape_trial(state, stack, spine, y, e, oq, oa, aq, aa, steps, sq, sa, keys, used, c, rk2,
                 gkeys, gused, side, budget, cpts, cw, minv, d_exp, spine_coef, bush_coef):
    """One reorganised left-tree walk from y in K whose first spine step is
    ``steps[e]``; see ``escape_batch``.  Returns (status, vertices, far, stack, spine)."""
    d = steps.shape[1]
    p = np.empty(d, dtype=np.int32)
    cell = np.empty(d, dtype=np.int32)
    kmax = oq.shape[0]
    for k in range(d):
        p[k] = y[k] + steps[e, k]
    ns = 0
    far = 0.0
    n = 1
    # the spine is a theta-walk; run it out of the guard first since it is
    # cheap and most failures happen on it
    while True:
        n += 1
        if n > budget:
            return TRUNCATED, n, 0.0, stack, spine
        if _dist2(p, c) <= rk2 and table_contains(keys, used, p):
            return HIT, n, 0.0, stack, spine
        if not _in_guard(p, cell, gkeys, gused, side):
            far += spine_coef * _potential(p, cpts, cw, minv, 0.5 * (4.0 - d_exp))
            break
        if ns == spine.shape[0]:
            spine = _double(spine)
        for k in range(d):
            spine[ns, k] = p[k]
        ns += 1
        s = alias_draw(state, sq, sa)
        for k in range(d):
            p[k] += steps[s, k]
    # bushes grafted on the spine vertices inside the guard, nearest first
    bexp = 0.5 * (2.0 - d_exp)
    for j in range(ns):
        nroots = alias_draw(state, aq, aa)
        if nroots == 0:
            continue
        while nroots >= stack.shape[0]:
            stack = _double(stack)
        top = -1
        for _ in range(nroots):
            s = alias_draw(state, sq, sa)
            top += 1
            for k in range(d):
                stack[top, k] = spine[j, k] + steps[s, k]
        while True:
            st, top, n, f = _explore_cells(state, stack, top, n, oq, oa, kmax, steps, sq, sa,
                                           keys, used, c, rk2, gkeys, gused, side, budget,
                                           cpts, cw, minv, bexp)
            far += bush_coef * f
            if st != GROW:
                break
            stack = _double(stack)
        if st != MISS:
            return st, n, 0.0, stack, spine
    return MISS, n, far, stack, spine


@nb.njit(cache=True)
def escape_batch(keys_rng, points, pair_pt, pair_step, pair_cdf, oq, oa, aq, aa, steps, sq, sa,
                 keys, used, c, rk2, gkeys, gused, side, budget, cpts, cw, minv, d_exp,
                 spine_coef, bush_coef):
    """Escape trials.  Each trial draws an exit pair (y, e) from ``pair_cdf``
    (y a point of K, e a step with y + e outside K, weight theta(e)); the
    caller multiplies the escape frequency by the total pair weight.

    A trial fails (HIT) as soon as a vertex of index >= 1 lands in K.  The
    tree is expanded only inside the guard (cells of side ``side`` listed in
    ``gkeys``).  On MISS, ``far`` holds the far-field exposure: the spine's
    exit point contributes ``spine_coef * sum_c cw_c |s - x_c|^(4 - d)`` and
    each frozen bush vertex ``bush_coef * sum_c cw_c |v - x_c|^(2 - d)``,
    where (x_c, cw_c) are cluster centres and weights of K.
    """
    m = keys_rng.shape[0]
    d = steps.shape[1]
    status = np.empty(m, dtype=np.int8)
    sizes = np.empty(m, dtype=np.int64)
    far = np.zeros(m)
    state = np.zeros(1, dtype=np.uint64)
    stack = np.empty((4096, d), dtype=np.int32)
    spine = np.empty((4096, d), dtype=np.int32)
    for t in range(m):
        state[0] = keys_rng[t]
        i = sample_cdf(state, pair_cdf)
        st, n, f, stack, spine = escape_trial(
            state, stack, spine, points[pair_pt[i]], pair_step[i], oq, oa, aq, aa, steps, sq, sa,
            keys, used, c, rk2, gkeys, gused, side, budget, cpts, cw, minv, d_exp,
            spine_coef, bush_coef)
        status[t] = st
        sizes[t] = n
        far[t] = f
    return status, sizes, far


@nb.njit(cache=True)
def dilate_cells(cells, radius):
    """All cells within Chebyshev distance ``radius`` of the given cells
    (with repeats)."""
    n, d = cells.shape
    w = 2 * radius + 1
    m = w**d
    out = np.empty((n * m, d), dtype=np.int32)
    for i in range(n):
        for o in range(m):
            r = o
            for k in range(d):
                out[i * m + o, k] = cells[i, k] + (r % w) - radius
                r //= w
    return out


@nb.njit(cache=True)
def exit_pairs(points, steps, probs, keys, used):
    """All (point index, step index) with point + step outside the set, and
    the step probabilities as weights."""
    n = points.shape[0]
    ns = steps.shape[0]
    d = points.shape[1]
    q = np.empty(d, dtype=np.int32)
    cnt = 0
    for i in range(n):
        for s in range(ns):
            for k in range(d):
                q[k] = points[i, k] + steps[s, k]
            if not table_contains(keys, used, q):
                cnt += 1
    pp = np.empty(cnt, dtype=np.int64)
    ps = np.empty(cnt, dtype=np.int64)
    w = np.empty(cnt)
    j = 0
    for i in range(n):
        for s in range(ns):
            for k in range(d):
                q[k] = points[i, k] + steps[s, k]
            if not table_contains(keys, used, q):
                pp[j] = i
                ps[j] = s
                w[j] = probs[s]
                j += 1
    return pp, ps, w


@nb.njit(cache=True)
def walk_hit_batch(keys_rng, x, steps, sq, sa, keys, used, c, rk2, guard2, max_steps):
    """theta-walks from x: HIT, MISS (left the guard ball) or TRUNCATED (step cap)."""
    m = keys_rng.shape[0]
    d = steps.shape[1]
    out = np.empty(m, dtype=np.int8)
    state = np.zeros(1, dtype=np.uint64)
    p = np.empty(d, dtype=np.int32)
    for t in range(m):
        state[0] = keys_rng[t]
        for k in range(d):
            p[k] = x[k]
        res = TRUNCATED
        for _ in range(max_steps):
            r2 = _dist2(p, c)
            if r2 <= rk2 and table_contains(keys, used, p):
                res = HIT
                break
            if r2 > guard2:
                res = MISS
                break
            s = alias_draw(state, sq, sa)
            for k in range(d):
                p[k] += steps[s, k]
        out[t] = res
    return out


@nb.njit(cache=True)
def _near_level(p, lv):
    return near_query_fast(p, lv[0], lv[1], lv[2], lv[3], lv[4], lv[5], lv[6], lv[7], lv[8],
                           lv[9], lv[10], lv[11], lv[12], lv[13])


@nb.njit(cache=True)
def intersect_batch(keys_rng, x, oq, oa, steps, sq, sa, xi_keys, xi_used, levels, budget):
    """Critical trees from x against a fixed path set A.

    ``levels`` holds ``NearIndex.fast_args()`` for increasing radii.  For each
    tree returns its status (HIT when a vertex lands in A, else MISS or
    TRUNCATED), the index of the smallest radius whose neighbourhood the
    range met (len(levels) if none) and the number of explored vertices.
    """
    m = keys_rng.shape[0]
    d = steps.shape[1]
    nlev = len(levels)
    kmax = oq.shape[0]
    status = np.empty(m, dtype=np.int8)
    best = np.empty(m, dtype=np.int16)
    sizes = np.empty(m, dtype=np.int64)
    state = np.zeros(1, dtype=np.uint64)
    stack = np.empty((4096, d), dtype=np.int32)
    p = np.empty(d, dtype=np.int32)
    for t in range(m):
        state[0] = keys_rng[t]
        for k in range(d):
            stack[0, k] = x[k]
        top = 0
        n = 0
        b = nlev
        st = MISS
        while top >= 0:
            if top + kmax >= stack.shape[0]:
                stack = _double(stack)
            for k in range(d):
                p[k] = stack[top, k]
            top -= 1
            n += 1
            if n > budget:
                st = TRUNCATED
                break
            if table_contains(xi_keys, xi_used, p):
                st = HIT
                b = 0
                break
            j = b - 1
            while j >= 0 and _near_level(p, levels[j]):
                b = j
                j -= 1
            nc = alias_draw(state, oq, oa)
            for _ in range(nc):
                s = alias_draw(state, sq, sa)
                top += 1
                for k in range(d):
                    stack[top, k] = p[k] + steps[s, k]
        status[t] = st
        best[t] = b
        sizes[t] = n
    return status, best, sizes
