"""Compiled inner loops (numba).

Everything here operates on plain arrays.  The grid layout is the one built
by :func:`percolip.spatial.build_index`: points are bucketed by integer cell,
``keys`` holds the sorted linear keys of the occupied cells, ``starts`` the
CSR offsets into ``order`` (point indices sorted by key, then index).
``dense`` is either empty or a per-cell offset table over the whole cell box.
Axis 0 has stride 1, so a row of cells along it is one contiguous slice.

All kernels release the GIL so independent queries can run on threads.
"""
import math

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True)


@njit(**_JIT)
def _cell_range(q, r, origin, cell, cell_lo, dims, lo_c, hi_c):
    """Fill the clamped relative cell box covering B(q, r).  False if empty."""
    d = q.shape[0]
    # widen slightly so squared-distance ties never fall outside the scan
    rr = r * (1.0 + 1e-9)
    for a in range(d):
        lo = math.floor((q[a] - rr - origin[a]) / cell) - cell_lo[a]
        hi = math.floor((q[a] + rr - origin[a]) / cell) - cell_lo[a]
        if lo < 0:
            lo = 0
        if hi > dims[a] - 1:
            hi = dims[a] - 1
        if lo > hi:
            return False
        lo_c[a] = lo
        hi_c[a] = hi
    return True


@njit(**_JIT)
def _row_slice(keys, starts, dense, key_lo, key_hi):
    """Slice of ``order`` holding the cells with linear keys in [key_lo, key_hi]."""
    if dense.shape[0] > 0:
        return dense[key_lo], dense[key_hi + 1]
    a = np.searchsorted(keys, key_lo)
    b = np.searchsorted(keys, key_hi, side="right")
    return starts[a], starts[b]


@njit(**_JIT)
def query_ball(pts, origin, cell, cell_lo, dims, strides, keys, starts, dense, order, q, r):
    """Indices i with |p_i - q|^2 <= r^2, ascending."""
    d = pts.shape[1]
    out = np.empty(16, np.int64)
    m = 0
    if keys.shape[0] == 0:
        return out[:0]
    lo_c = np.empty(d, np.int64)
    hi_c = np.empty(d, np.int64)
    cur = np.empty(d, np.int64)
    if not _cell_range(q, r, origin, cell, cell_lo, dims, lo_c, hi_c):
        return out[:0]
    r2 = r * r
    for a in range(d):
        cur[a] = lo_c[a]
    while True:
        key = 0
        for a in range(1, d):
            key += cur[a] * strides[a]
        beg, end = _row_slice(keys, starts, dense, key + lo_c[0], key + hi_c[0])
        for t in range(beg, end):
            j = order[t]
            d2 = 0.0
            for a in range(d):
                diff = pts[j, a] - q[a]
                d2 += diff * diff
            if d2 <= r2:
                if m == out.shape[0]:
                    grown = np.empty(2 * m, np.int64)
                    grown[:m] = out
                    out = grown
                out[m] = j
                m += 1
        a = 1
        while a < d:
            cur[a] += 1
            if cur[a] <= hi_c[a]:
                break
            cur[a] = lo_c[a]
            a += 1
        if a >= d:
            break
    res = out[:m].copy()
    res.sort()
    return res


@njit(**_JIT)
def radius_graph(pts, origin, cell, cell_lo, dims, strides, keys, starts, dense, order, r):
    """CSR adjacency (indptr, indices, weights) of the closed r-ball graph, no self loops."""
    n, d = pts.shape
    indptr = np.zeros(n + 1, np.int64)
    rows = []
    total = 0
    for i in range(n):
        nb = query_ball(pts, origin, cell, cell_lo, dims, strides, keys, starts, dense, order, pts[i], r)
        cnt = 0
        for j in nb:
            if j != i:
                cnt += 1
        row = np.empty(cnt, np.int64)
        c = 0
        for j in nb:
            if j != i:
                row[c] = j
                c += 1
        rows.append(row)
        total += cnt
        indptr[i + 1] = total
    indices = np.empty(total, np.int64)
    weights = np.empty(total, np.float64)
    for i in range(n):
        row = rows[i]
        base = indptr[i]
        for c in range(row.shape[0]):
            j = row[c]
            indices[base + c] = j
            d2 = 0.0
            for a in range(d):
                diff = pts[j, a] - pts[i, a]
                d2 += diff * diff
            weights[base + c] = math.sqrt(d2)
    return indptr, indices, weights


# --- indexed binary heap keyed by (dist[node], node) -------------------------

@njit(**_JIT)
def _less(dist, a, b):
    da = dist[a]
    db = dist[b]
    return da < db or (da == db and a < b)


@njit(**_JIT)
def _sift_up(heap, pos, dist, k):
    node = heap[k]
    while k > 0:
        parent = (k - 1) >> 1
        other = heap[parent]
        if _less(dist, node, other):
            heap[k] = other
            pos[other] = k
            k = parent
        else:
            break
    heap[k] = node
    pos[node] = k


@njit(**_JIT)
def _sift_down(heap, pos, dist, k, size):
    node = heap[k]
    while True:
        child = 2 * k + 1
        if child >= size:
            break
        if child + 1 < size and _less(dist, heap[child + 1], heap[child]):
            child += 1
        other = heap[child]
        if _less(dist, other, node):
            heap[k] = other
            pos[other] = k
            k = child
        else:
            break
    heap[k] = node
    pos[node] = k


@njit(**_JIT)
def _chain(pred, v, buf):
    """Write the path root..v into buf; return its length."""
    m = 0
    while v >= 0:
        buf[m] = v
        m += 1
        v = pred[v]
    # reverse in place
    for k in range(m // 2):
        t = buf[k]
        buf[k] = buf[m - 1 - k]
        buf[m - 1 - k] = t
    return m


@njit(**_JIT)
def path_less(pred, a, b, j):
    """True iff path(a) + [j] is lexicographically smaller than path(b) + [j]."""
    if a == b:
        return False
    n = pred.shape[0]
    pa = np.empty(n + 1, np.int64)
    pb = np.empty(n + 1, np.int64)
    ma = _chain(pred, a, pa)
    mb = _chain(pred, b, pb)
    pa[ma] = j
    pb[mb] = j
    ma += 1
    mb += 1
    m = min(ma, mb)
    for k in range(m):
        if pa[k] != pb[k]:
            return pa[k] < pb[k]
    return ma < mb


@njit(**_JIT)
def dijkstra(pts, origin, cell, cell_lo, dims, strides, keys, starts, dense, order,
             sources, h, target_mask, n_targets, clip_center, clip_r2, stop_at):
    """Label-setting search on the implicit step-h graph.

    ``sources`` start at distance 0 (they are the points inside the source
    halo).  ``target_mask[i]`` is a bitmask of the targets whose halo contains
    point i.  The search stops once every target has a settled point and the
    queue key exceeds the worst target distance, or once the key exceeds
    ``stop_at``.  Points farther than sqrt(clip_r2) from ``clip_center`` are
    never entered.  Equal-length paths are resolved to the lexicographically
    smallest index sequence.

    Returns (dist, pred, settled_count).
    """
    n, d = pts.shape
    dist = np.full(n, np.inf)
    pred = np.full(n, -1, np.int64)
    done = np.zeros(n, np.bool_)
    heap = np.empty(max(n, 1), np.int64)
    pos = np.full(n, -1, np.int64)
    size = 0
    h2 = h * h
    clipped = clip_r2 < np.inf

    for s in sources:
        if dist[s] != 0.0:
            dist[s] = 0.0
            heap[size] = s
            pos[s] = size
            size += 1
            _sift_up(heap, pos, dist, size - 1)

    tgt_done = np.zeros(max(n_targets, 1), np.bool_)
    resolved = 0
    worst = -np.inf
    explored = 0

    lo_c = np.empty(d, np.int64)
    hi_c = np.empty(d, np.int64)
    cur = np.empty(d, np.int64)

    while size > 0:
        i = heap[0]
        di = dist[i]
        if di > stop_at:
            break
        if n_targets > 0 and resolved == n_targets and di > worst:
            break
        # pop
        size -= 1
        pos[i] = -1
        if size > 0:
            heap[0] = heap[size]
            pos[heap[0]] = 0
            _sift_down(heap, pos, dist, 0, size)
        done[i] = True
        explored += 1

        m = target_mask[i]
        if m != 0:
            for t in range(n_targets):
                if (m >> t) & 1 and not tgt_done[t]:
                    tgt_done[t] = True
                    resolved += 1
                    if di > worst:
                        worst = di

        if not _cell_range(pts[i], h, origin, cell, cell_lo, dims, lo_c, hi_c):
            continue
        for a in range(d):
            cur[a] = lo_c[a]
        while True:
            key = 0
            for a in range(1, d):
                key += cur[a] * strides[a]
            beg, end = _row_slice(keys, starts, dense, key + lo_c[0], key + hi_c[0])
            for t in range(beg, end):
                j = order[t]
                if done[j]:
                    continue
                d2 = 0.0
                for a in range(d):
                    diff = pts[j, a] - pts[i, a]
                    d2 += diff * diff
                if d2 > h2:
                    continue
                if clipped:
                    c2 = 0.0
                    for a in range(d):
                        diff = pts[j, a] - clip_center[a]
                        c2 += diff * diff
                    if c2 > clip_r2:
                        continue
                nd = di + math.sqrt(d2)
                if nd < dist[j]:
                    dist[j] = nd
                    pred[j] = i
                    if pos[j] < 0:
                        heap[size] = j
                        pos[j] = size
                        size += 1
                    _sift_up(heap, pos, dist, pos[j])
                elif nd == dist[j] and path_less(pred, i, pred[j], j):
                    pred[j] = i
            a = 1
            while a < d:
                cur[a] += 1
                if cur[a] <= hi_c[a]:
                    break
                cur[a] = lo_c[a]
                a += 1
            if a >= d:
                break
    return dist, pred, explored


# --- graph infinity Laplacian -------------------------------------------------

@njit(**_JIT)
def inf_laplacian(u, i, indptr, indices, weights):
    """Sum of the largest and smallest difference quotient at vertex i."""
    qmax = -np.inf
    qmin = np.inf
    ui = u[i]
    for k in range(indptr[i], indptr[i + 1]):
        q = (u[indices[k]] - ui) / weights[k]
        if q > qmax:
            qmax = q
        if q < qmin:
            qmin = q
    return qmax + qmin


@njit(**_JIT)
def max_residual(u, interior, indptr, indices, weights):
    res = 0.0
    for i in interior:
        r = abs(inf_laplacian(u, i, indptr, indices, weights))
        if r > res:
            res = r
    return res


@njit(**_JIT)
def local_root(u, i, indptr, indices, weights):
    """Value t at vertex i for which the extreme quotients cancel.

    F(t) = max_j (u_j - t)/w_j + min_j (u_j - t)/w_j is strictly decreasing.
    Each step is the two-point closed form for the current argmax/argmin
    pair, safeguarded by a bisection bracket; the pair is re-selected after
    every step, so the loop ends on the exact root of the active pair.
    """
    beg = indptr[i]
    end = indptr[i + 1]
    lo = np.inf
    hi = -np.inf
    for k in range(beg, end):
        v = u[indices[k]]
        if v < lo:
            lo = v
        if v > hi:
            hi = v
    if lo == hi:
        return lo
    t = u[i]
    if t < lo:
        t = lo
    elif t > hi:
        t = hi
    for _ in range(200):
        qmax = -np.inf
        qmin = np.inf
        kp = beg
        km = beg
        for k in range(beg, end):
            q = (u[indices[k]] - t) / weights[k]
            if q > qmax:
                qmax = q
                kp = k
            if q < qmin:
                qmin = q
                km = k
        f = qmax + qmin
        if f == 0.0:
            return t
        a = weights[kp]
        b = weights[km]
        tn = (b * u[indices[kp]] + a * u[indices[km]]) / (a + b)
        # the pair root lies on the side f points to; otherwise t is the
        # root up to rounding
        if (f > 0.0 and tn <= t) or (f < 0.0 and tn >= t):
            return t
        if f > 0.0:
            lo = t
        else:
            hi = t
        if not (lo < tn < hi):
            tn = 0.5 * (lo + hi)
            if not (lo < tn < hi):
                return t
        t = tn
    return t


@njit(**_JIT)
def gauss_seidel(u, interior, indptr, indices, weights, tol, max_sweeps):
    """In-place sweeps in the given vertex order.  Returns (sweeps, residual).

    The residual is recomputed after every sweep once it is within 100 tol,
    and every 8 sweeps before that (it costs as much as a sweep).
    """
    res = max_residual(u, interior, indptr, indices, weights)
    sweeps = 0
    while res >= tol and sweeps < max_sweeps:
        for i in interior:
            u[i] = local_root(u, i, indptr, indices, weights)
        sweeps += 1
        if res < 100.0 * tol or sweeps % 8 == 0 or sweeps == max_sweeps:
            res = max_residual(u, interior, indptr, indices, weights)
    return sweeps, res


@njit(**_JIT)
def ball_min(pts, origin, cell, cell_lo, dims, strides, keys, starts, dense, order, values, qs, r):
    """For each query row, the minimum of ``values`` over points in the closed r-ball."""
    out = np.full(qs.shape[0], np.inf)
    for k in range(qs.shape[0]):
        nb = query_ball(pts, origin, cell, cell_lo, dims, strides, keys, starts, dense, order, qs[k], r)
        for j in nb:
            if values[j] < out[k]:
                out[k] = values[j]
    return out
