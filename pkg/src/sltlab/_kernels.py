"""Compiled random-walk loops.

Kernels carry their own xoroshiro128+ generator, seeded from an integer
through splitmix64, so every result is a function of the arguments alone.
"""
from __future__ import annotations

import numpy as np
from numba import njit, uint64


@njit(cache=True, inline="always")
def _rotl(x, k):
    return (x << uint64(k)) | (x >> uint64(64 - k))


@njit(cache=True)
def make_state(seed):
    s = np.empty(2, dtype=np.uint64)
    z = uint64(seed) + uint64(0x9E3779B97F4A7C15)
    for i in range(2):
        z = z + uint64(0x9E3779B97F4A7C15)
        y = z
        y = (y ^ (y >> uint64(30))) * uint64(0xBF58476D1CE4E5B9)
        y = (y ^ (y >> uint64(27))) * uint64(0x94D049BB133111EB)
        s[i] = y ^ (y >> uint64(31))
    return s


@njit(cache=True, inline="always")
def _next(s):
    s0 = s[0]
    s1 = s[1]
    r = s0 + s1
    s1 ^= s0
    s[0] = _rotl(s0, 24) ^ s1 ^ (s1 << uint64(16))
    s[1] = _rotl(s1, 37)
    return r


@njit(cache=True, inline="always")
def uniform(s):
    return (_next(s) >> uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True, inline="always")
def randint(s, n):
    return int(uniform(s) * n)


@njit(cache=True, inline="always")
def exponential(s):
    return -np.log(1.0 - uniform(s))


@njit(cache=True)
def _pick(cdf, u):
    # first index with cdf[i] > u
    lo, hi = 0, cdf.shape[0] - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if cdf[mid] > u:
            hi = mid
        else:
            lo = mid + 1
    return lo


@njit(cache=True)
def green_visits(targets, n_walks, radius, seed):
    """Visit counts to ``targets`` of walks from 0 stopped at ``|x| >= radius``.

    Returns per-target sums of visit counts, of squared counts and of the
    continuum tail ``sum_k 1/|X_tau - y_k|`` evaluated at the stopping point.
    The sums are taken over walks; callers turn them into means.
    """
    rs = make_state(seed)
    d = targets.shape[1]
    m = targets.shape[0]
    r2 = radius * radius
    s1 = np.zeros(m)
    s2 = np.zeros(m)
    tail = np.zeros(m)
    tail2 = np.zeros(m)
    cnt = np.zeros(m)
    x = np.zeros(d, dtype=np.int64)
    tn2 = np.zeros(m, dtype=np.int64)
    for k in range(m):
        for i in range(d):
            tn2[k] += targets[k, i] * targets[k, i]
    near = tn2.max()
    two_d = 2 * d
    for _ in range(n_walks):
        for i in range(d):
            x[i] = 0
        for k in range(m):
            cnt[k] = 0.0
        n2 = 0
        while n2 < r2:
            if n2 <= near:
                for k in range(m):
                    if tn2[k] != n2:
                        continue
                    same = True
                    for i in range(d):
                        if x[i] != targets[k, i]:
                            same = False
                            break
                    if same:
                        cnt[k] += 1.0
            j = randint(rs, two_d)
            i = j >> 1
            if j & 1:
                n2 += 1 - 2 * x[i]
                x[i] -= 1
            else:
                n2 += 1 + 2 * x[i]
                x[i] += 1
        for k in range(m):
            dd = 0.0
            for i in range(d):
                dd += (x[i] - targets[k, i]) ** 2
            t = 1.0 / np.sqrt(dd)
            s1[k] += cnt[k]
            s2[k] += cnt[k] * cnt[k]
            tail[k] += t
            tail2[k] += t * t
    return s1, s2, tail, tail2


@njit(cache=True)
def escape_walks(mask, lo, start, n_walks, center, radius, seed):
    """Walks from ``start`` stopped on returning to the set or reaching the sphere.

    ``mask`` is a boolean box for the set with lower corner ``lo``.  The
    first step is always taken.  Returns the stopping points of walks that
    reached the sphere (rows) and their number.
    """
    rs = make_state(seed)
    d = start.shape[0]
    r2 = radius * radius
    out = np.empty((n_walks, d), dtype=np.int64)
    n_out = 0
    x = np.empty(d, dtype=np.int64)
    shp = mask.shape
    for _ in range(n_walks):
        for i in range(d):
            x[i] = start[i]
        while True:
            j = randint(rs, 2 * d)
            if j % 2 == 0:
                x[j // 2] += 1
            else:
                x[j // 2] -= 1
            inside = True
            for i in range(d):
                c = x[i] - lo[i]
                if c < 0 or c >= shp[i]:
                    inside = False
                    break
            if inside:
                if d == 3:
                    hit = mask[x[0] - lo[0], x[1] - lo[1], x[2] - lo[2]]
                else:
                    hit = _mask_nd(mask, x, lo)
                if hit:
                    break
            n2 = 0.0
            for i in range(d):
                n2 += (x[i] - center[i]) ** 2
            if n2 >= r2:
                for i in range(d):
                    out[n_out, i] = x[i]
                n_out += 1
                break
    return out[:n_out], n_out


@njit(cache=True)
def _mask_nd(mask, x, lo):
    flat = mask.ravel()
    idx = 0
    for i in range(x.shape[0]):
        idx = idx * mask.shape[i] + (x[i] - lo[i])
    return flat[idx]


@njit(cache=True)
def walk_until_label(labels, strides, start, stop_bits, step_cap, seed):
    """Flat-index walk until a cell carrying any of ``stop_bits`` is reached.

    Returns the visited cells and a flag that is 0 on success and 1 when the
    step cap was hit first.
    """
    rs = make_state(seed)
    buf = np.empty(1024, dtype=np.int64)
    buf[0] = start
    n = 1
    x = start
    nd = strides.shape[0]
    if labels[x] & stop_bits:
        return buf[:1], 0
    steps = 0
    while steps < step_cap:
        x = x + strides[randint(rs, nd)]
        if n == buf.shape[0]:
            nb = np.empty(2 * n, dtype=np.int64)
            nb[:n] = buf
            buf = nb
        buf[n] = x
        n += 1
        steps += 1
        if labels[x] & stop_bits:
            return buf[:n], 0
    return buf[:n], 1


@njit(cache=True)
def excursion_endpoints(labels, strides, starts, a1_bit, v_bit, stop_bits, seed):
    """Run one walk per start until a ``stop_bits`` cell; report endpoint data.

    For each walk returns the first ``a1_bit`` cell (or -1), the last
    ``v_bit`` cell visited (or -1) and the stopping cell.
    """
    rs = make_state(seed)
    n = starts.shape[0]
    first_a = np.full(n, -1, dtype=np.int64)
    last_v = np.full(n, -1, dtype=np.int64)
    exit_pt = np.empty(n, dtype=np.int64)
    nd = strides.shape[0]
    for k in range(n):
        x = starts[k]
        fa = -1
        lv = -1
        while True:
            lab = labels[x]
            if lab & stop_bits:
                break
            if fa < 0 and (lab & a1_bit):
                fa = x
            if lab & v_bit:
                lv = x
            x = x + strides[randint(rs, nd)]
        first_a[k] = fa
        last_v[k] = lv
        exit_pt[k] = x
    return first_a, last_v, exit_pt


@njit(cache=True)
def h_walk(h, strides, start, target, stop_prob, step_cap, seed):
    """Doob-transformed walk driven by the non-negative grid function ``h``.

    From ``x`` the next cell is chosen proportionally to ``h`` over the
    neighbours.  The walk stops at each visit to ``target`` with probability
    ``stop_prob``.  Returns the path and a failure flag (1 when the cap was
    hit).
    """
    rs = make_state(seed)
    nd = strides.shape[0]
    buf = np.empty(256, dtype=np.int64)
    buf[0] = start
    n = 1
    x = start
    w = np.empty(nd)
    steps = 0
    while True:
        if x == target and uniform(rs) < stop_prob:
            return buf[:n], 0
        if steps >= step_cap:
            return buf[:n], 1
        tot = 0.0
        for j in range(nd):
            hv = h[x + strides[j]]
            w[j] = hv
            tot += hv
        u = uniform(rs) * tot
        acc = 0.0
        jj = nd - 1
        for j in range(nd):
            acc += w[j]
            if u < acc:
                jj = j
                break
        x = x + strides[jj]
        if n == buf.shape[0]:
            nb = np.empty(2 * n, dtype=np.int64)
            nb[:n] = buf
            buf = nb
        buf[n] = x
        n += 1
        steps += 1


@njit(cache=True)
def window_walks(win, ext, strides, starts, cdf, p_ret, bd_cells, bits, record, seed):
    """Walks through a finite window with exact re-entry jumps.

    ``win[cell]`` is the window row of a cell (or -1) and ``ext[cell]`` the
    row of an outer-boundary cell in ``cdf``/``p_ret`` (or -1).  A walk that
    steps onto outer-boundary row ``e`` comes back with probability
    ``p_ret[e]``, landing on ``bd_cells[k]`` with ``k`` drawn from the
    cumulative row ``cdf[e]``; otherwise it is gone for good.

    Returns the OR of ``bits`` over window cells visited by each walk, and
    when ``record`` is set the visited cells (outer-boundary exits included),
    per-walk offsets into them and a flag marking cells reached by a jump.
    """
    rs = make_state(seed)
    n = starts.shape[0]
    out_bits = np.zeros(n, dtype=np.int64)
    cap = 1024 if record else 1
    cells = np.empty(cap, dtype=np.int64)
    jumped = np.zeros(cap, dtype=np.bool_)
    offsets = np.zeros(n + 1, dtype=np.int64)
    m = 0
    nd = strides.shape[0]
    for k in range(n):
        x = starts[k]
        jump = False
        acc = 0
        while True:
            w = win[x]
            if w >= 0:
                acc |= bits[w]
            if record:
                if m == cells.shape[0]:
                    nc = np.empty(2 * m, dtype=np.int64)
                    nc[:m] = cells
                    cells = nc
                    nj = np.zeros(2 * m, dtype=np.bool_)
                    nj[:m] = jumped
                    jumped = nj
                cells[m] = x
                jumped[m] = jump
                m += 1
            jump = False
            if w < 0:
                e = ext[x]
                if uniform(rs) >= p_ret[e]:
                    break
                x = bd_cells[_pick(cdf[e], uniform(rs))]
                jump = True
                continue
            x = x + strides[randint(rs, nd)]
        out_bits[k] = acc
        offsets[k + 1] = m
    return out_bits, cells[:m], offsets, jumped[:m]


@njit(cache=True)
def h_walk_indexed(hcol, imap, strides, start, target, stop_prob, step_cap, seed):
    """:func:`h_walk` with ``h(x) = hcol[imap[x]]`` (zero where ``imap`` is -1)."""
    rs = make_state(seed)
    nd = strides.shape[0]
    buf = np.empty(256, dtype=np.int64)
    buf[0] = start
    n = 1
    x = start
    w = np.empty(nd)
    steps = 0
    while True:
        if x == target and uniform(rs) < stop_prob:
            return buf[:n], 0
        if steps >= step_cap:
            return buf[:n], 1
        tot = 0.0
        for j in range(nd):
            k = imap[x + strides[j]]
            hv = 0.0
            if k >= 0:
                hv = hcol[k]
            w[j] = hv
            tot += hv
        u = uniform(rs) * tot
        acc = 0.0
        jj = nd - 1
        for j in range(nd):
            acc += w[j]
            if u < acc:
                jj = j
                break
        x = x + strides[jj]
        if n == buf.shape[0]:
            nb = np.empty(2 * n, dtype=np.int64)
            nb[:n] = buf
            buf = nb
        buf[n] = x
        n += 1
        steps += 1


@njit(cache=True)
def bridge_endpoints(h, labels, strides, start, target, n_walks, a1_bit, v_bit, seed):
    """Endpoint data of ``n_walks`` walks driven by ``h`` from ``start`` until ``target``.

    Returns the first ``a1_bit`` cell and the last ``v_bit`` cell of each
    walk (-1 when absent) and the path lengths.
    """
    rs = make_state(seed)
    nd = strides.shape[0]
    first_a = np.full(n_walks, -1, dtype=np.int64)
    last_v = np.full(n_walks, -1, dtype=np.int64)
    length = np.zeros(n_walks, dtype=np.int64)
    w = np.empty(nd)
    for k in range(n_walks):
        x = start
        fa = -1
        lv = -1
        steps = 0
        while x != target:
            lab = labels[x]
            if fa < 0 and (lab & a1_bit):
                fa = x
            if lab & v_bit:
                lv = x
            tot = 0.0
            for j in range(nd):
                hv = h[x + strides[j]]
                w[j] = hv
                tot += hv
            u = uniform(rs) * tot
            acc = 0.0
            jj = nd - 1
            for j in range(nd):
                acc += w[j]
                if u < acc:
                    jj = j
                    break
            x = x + strides[jj]
            steps += 1
        first_a[k] = fa
        last_v[k] = lv
        length[k] = steps
    return first_a, last_v, length
