"""Compiled inner loops shared by the graph, solver and random-walk modules.

Every parallel loop writes only to its own row/trial slot, so results do not
depend on the numba thread count.
"""
import warnings

import numpy as np
from numba import njit, prange

warnings.filterwarnings("ignore", message="The TBB threading layer")

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


# ---------------------------------------------------------------------------
# grid neighbour search
# ---------------------------------------------------------------------------

@njit(cache=True)
def _find_cell(cell_ids, key):
    lo = 0
    hi = cell_ids.shape[0]
    while lo < hi:
        mid = (lo + hi) >> 1
        if cell_ids[mid] < key:
            lo = mid + 1
        else:
            hi = mid
    if lo < cell_ids.shape[0] and cell_ids[lo] == key:
        return lo
    return -1


@njit(cache=True)
def _scan_row(i, X, coords, dims, strides, offsets, cell_ids, cell_start,
              order, r2, out_cols, out_d2, fill):
    d = X.shape[1]
    count = 0
    for o in range(offsets.shape[0]):
        key = 0
        ok = True
        for k in range(d):
            c = coords[i, k] + offsets[o, k]
            if c < 0 or c >= dims[k]:
                ok = False
                break
            key += c * strides[k]
        if not ok:
            continue
        pos = _find_cell(cell_ids, key)
        if pos < 0:
            continue
        for s in range(cell_start[pos], cell_start[pos + 1]):
            j = order[s]
            d2 = 0.0
            for k in range(d):
                diff = X[i, k] - X[j, k]
                d2 += diff * diff
            if d2 <= r2:
                if fill:
                    out_cols[count] = j
                    out_d2[count] = d2
                count += 1
    return count


@njit(parallel=True, cache=True)
def grid_count(X, coords, dims, strides, offsets, cell_ids, cell_start, order, r2):
    n = X.shape[0]
    counts = np.zeros(n, dtype=np.int64)
    dummy_c = np.empty(0, dtype=np.int32)
    dummy_d = np.empty(0, dtype=np.float64)
    for i in prange(n):
        counts[i] = _scan_row(i, X, coords, dims, strides, offsets, cell_ids,
                              cell_start, order, r2, dummy_c, dummy_d, False)
    return counts


@njit(parallel=True, cache=True)
def grid_fill(X, coords, dims, strides, offsets, cell_ids, cell_start, order,
              r2, indptr, indices, data):
    n = X.shape[0]
    for i in prange(n):
        a = indptr[i]
        b = indptr[i + 1]
        cols = indices[a:b]
        d2s = data[a:b]
        _scan_row(i, X, coords, dims, strides, offsets, cell_ids, cell_start,
                  order, r2, cols, d2s, True)
        perm = np.argsort(cols)
        tmp_c = cols[perm]
        tmp_d = d2s[perm]
        for t in range(b - a):
            cols[t] = tmp_c[t]
            d2s[t] = tmp_d[t]


# ---------------------------------------------------------------------------
# sparse operators
# ---------------------------------------------------------------------------

@njit(parallel=True, cache=True)
def laplacian_rows(indptr, indices, data, u):
    n = indptr.shape[0] - 1
    out = np.empty(n, dtype=np.float64)
    for i in prange(n):
        ui = u[i]
        acc = 0.0
        for t in range(indptr[i], indptr[i + 1]):
            acc += data[t] * (ui - u[indices[t]])
        out[i] = acc
    return out


@njit(parallel=True, cache=True)
def masked_apply(indptr, indices, data, deg, free, x):
    """(D - W) x restricted to free rows; x must vanish on fixed nodes."""
    n = indptr.shape[0] - 1
    out = np.zeros(n, dtype=np.float64)
    for i in prange(n):
        if not free[i]:
            continue
        acc = 0.0
        for t in range(indptr[i], indptr[i + 1]):
            acc += data[t] * x[indices[t]]
        out[i] = deg[i] * x[i] - acc
    return out


@njit(parallel=True, cache=True)
def masked_apply_block(indptr, indices, data, deg, free, x):
    n = indptr.shape[0] - 1
    m = x.shape[1]
    out = np.zeros((n, m), dtype=np.float64)
    for i in prange(n):
        if not free[i]:
            continue
        for t in range(indptr[i], indptr[i + 1]):
            w = data[t]
            j = indices[t]
            for c in range(m):
                out[i, c] -= w * x[j, c]
        for c in range(m):
            out[i, c] += deg[i] * x[i, c]
    return out


@njit(parallel=True, cache=True)
def row_energy(indptr, indices, data, u, p):
    n = indptr.shape[0] - 1
    out = np.empty(n, dtype=np.float64)
    for i in prange(n):
        ui = u[i]
        acc = 0.0
        if p == 2.0:
            for t in range(indptr[i], indptr[i + 1]):
                diff = ui - u[indices[t]]
                acc += data[t] * diff * diff
        else:
            for t in range(indptr[i], indptr[i + 1]):
                acc += data[t] * abs(ui - u[indices[t]]) ** p
        out[i] = acc
    return out


@njit(parallel=True, cache=True)
def plap_rows(indptr, indices, data, u, p):
    """Rows of sum_j w_ij |u_i-u_j|^(p-2)(u_i-u_j) and sum_j w_ij |u_i-u_j|^(p-1)."""
    n = indptr.shape[0] - 1
    res = np.empty(n, dtype=np.float64)
    mag = np.empty(n, dtype=np.float64)
    for i in prange(n):
        ui = u[i]
        r = 0.0
        a = 0.0
        for t in range(indptr[i], indptr[i + 1]):
            diff = ui - u[indices[t]]
            ad = abs(diff)
            if ad > 0.0:
                v = data[t] * ad ** (p - 1.0)
                a += v
                r += v if diff > 0.0 else -v
        res[i] = r
        mag[i] = a
    return res, mag


@njit(parallel=True, cache=True)
def irls_weights(indptr, indices, data, u, p, floor):
    nnz = data.shape[0]
    n = indptr.shape[0] - 1
    out = np.empty(nnz, dtype=np.float64)
    for i in prange(n):
        ui = u[i]
        for t in range(indptr[i], indptr[i + 1]):
            ad = abs(ui - u[indices[t]])
            if p >= 2.0:
                f = ad ** (p - 2.0)
                if f < floor:
                    f = floor
            else:
                if ad < floor:
                    ad = floor
                f = ad ** (p - 2.0)
            out[t] = data[t] * f
    return out


# ---------------------------------------------------------------------------
# counter-based random numbers (SplitMix64 evaluated at key + k * golden)
# ---------------------------------------------------------------------------

@njit(cache=True)
def mix64(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def stream_key(seed, a, b):
    k = mix64(np.uint64(seed) + _GOLDEN)
    k = mix64(k ^ (np.uint64(a) * _GOLDEN + np.uint64(0x632BE59BD9B4E019)))
    k = mix64(k ^ (np.uint64(b) * _GOLDEN + np.uint64(0x8CB92BA72F3D8DD7)))
    return k


@njit(cache=True)
def uniform_at(key, counter):
    z = mix64(key + (np.uint64(counter) + np.uint64(1)) * _GOLDEN)
    return (z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def _next_node(indptr, indices, cumw, deg, x, r):
    target = r * deg[x]
    lo = indptr[x]
    hi = indptr[x + 1] - 1
    while lo < hi:
        mid = (lo + hi) >> 1
        if cumw[mid] > target:
            hi = mid
        else:
            lo = mid + 1
    return indices[lo]


@njit(cache=True)
def walk_one(indptr, indices, cumw, deg, start, key, counter):
    return _next_node(indptr, indices, cumw, deg, start, uniform_at(key, counter))


@njit(parallel=True, cache=True)
def graph_walks(indptr, indices, cumw, deg, labeled, values, points, start,
                trials, max_steps, seed, start_tag):
    payoff = np.zeros(trials, dtype=np.float64)
    hit = np.zeros(trials, dtype=np.int64)
    disp = np.zeros(trials, dtype=np.float64)
    censored = np.zeros(trials, dtype=np.bool_)
    d = points.shape[1]
    for t in prange(trials):
        key = stream_key(seed, start_tag, t)
        x = start
        k = 0
        while not labeled[x] and k < max_steps:
            x = _next_node(indptr, indices, cumw, deg, x, uniform_at(key, k))
            k += 1
        if labeled[x]:
            payoff[t] = values[x]
        else:
            censored[t] = True
        hit[t] = k
        if d > 0:
            acc = 0.0
            for c in range(d):
                diff = points[x, c] - points[start, c]
                acc += diff * diff
            disp[t] = np.sqrt(acc)
    return payoff, hit, disp, censored


@njit(parallel=True, cache=True)
def lattice_walks(start, m, side, trials, max_steps, seed, start_tag):
    """Lazy walk on the torus (Z/side)^d; stops at the first k > 0 with all
    coordinates divisible by m.  Returns end sites (wrapped), unwrapped
    displacement (in lattice units), hitting times and censor flags."""
    d = start.shape[0]
    moves = 2 * d + 1
    end = np.zeros((trials, d), dtype=np.int64)
    shift = np.zeros((trials, d), dtype=np.int64)
    hit = np.zeros(trials, dtype=np.int64)
    censored = np.zeros(trials, dtype=np.bool_)
    for t in prange(trials):
        key = stream_key(seed, start_tag, t)
        pos = start.copy()
        off = np.zeros(d, dtype=np.int64)
        k = 0
        done = False
        while k < max_steps:
            r = uniform_at(key, k)
            mv = int(r * moves)
            if mv >= moves:
                mv = moves - 1
            k += 1
            if mv < 2 * d:
                axis = mv >> 1
                step = 1 if (mv & 1) == 0 else -1
                pos[axis] = (pos[axis] + step) % side
                off[axis] += step
            on = True
            for c in range(d):
                if pos[c] % m != 0:
                    on = False
                    break
            if on:
                done = True
                break
        for c in range(d):
            end[t, c] = pos[c]
            shift[t, c] = off[c]
        hit[t] = k
        censored[t] = not done
    return end, shift, hit, censored


@njit(cache=True)
def row_sums(indptr, data):
    n = indptr.shape[0] - 1
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        acc = 0.0
        for t in range(indptr[i], indptr[i + 1]):
            acc += data[t]
        out[i] = acc
    return out


@njit(cache=True)
def _profile(kind, t):
    if kind == 0:
        return 1.0
    return np.exp(-2.0 * t * t)


@njit(parallel=True, cache=True)
def grid_rows(X, coords, dims, strides, offsets, cell_ids, cell_start, order, r2,
              rows, u, p, inv_eps, scale, kind):
    """Matrix-free row reductions for selected nodes.

    Returns sum_j w_ij (u_i - u_j), sum_j w_ij |u_i - u_j|^p and sum_j w_ij,
    with w_ij = scale * eta(|x_i - x_j| * inv_eps) over |x_i - x_j|^2 <= r2.
    ``kind`` 0 is the indicator profile, 1 the Gaussian exp(-2 t^2).
    """
    m = rows.shape[0]
    d = X.shape[1]
    lap = np.zeros(m, dtype=np.float64)
    en = np.zeros(m, dtype=np.float64)
    deg = np.zeros(m, dtype=np.float64)
    for r in prange(m):
        i = rows[r]
        ui = u[i]
        a_lap = 0.0
        a_en = 0.0
        a_deg = 0.0
        for o in range(offsets.shape[0]):
            key = 0
            ok = True
            for k in range(d):
                c = coords[i, k] + offsets[o, k]
                if c < 0 or c >= dims[k]:
                    ok = False
                    break
                key += c * strides[k]
            if not ok:
                continue
            pos = _find_cell(cell_ids, key)
            if pos < 0:
                continue
            for s in range(cell_start[pos], cell_start[pos + 1]):
                j = order[s]
                d2 = 0.0
                for k in range(d):
                    diff = X[i, k] - X[j, k]
                    d2 += diff * diff
                if d2 <= r2:
                    w = scale * _profile(kind, np.sqrt(d2) * inv_eps)
                    diff = ui - u[j]
                    a_lap += w * diff
                    a_deg += w
                    if p == 2.0:
                        a_en += w * diff * diff
                    else:
                        a_en += w * abs(diff) ** p
        lap[r] = a_lap
        en[r] = a_en
        deg[r] = a_deg
    return lap, en, deg


@njit(cache=True)
def row_cumsum(indptr, data):
    out = np.empty_like(data)
    for i in range(indptr.shape[0] - 1):
        acc = 0.0
        for t in range(indptr[i], indptr[i + 1]):
            acc += data[t]
            out[t] = acc
    return out
