"""Compiled inner loops for the encoders.

Loops run sequentially over points, so gradient scatters accumulate in a
fixed order and results are bit-reproducible.
"""

from __future__ import annotations

import math

import numba
import numpy as np

_P1 = np.uint64(73856093)
_P2 = np.uint64(19349663)
_P3 = np.uint64(83492791)

_jit = numba.njit(cache=True, nogil=True)
# Reassociation lets the per-corner channel reductions vectorize; the order
# is still fixed by the code, so results stay reproducible run to run.
_jit_fast = numba.njit(cache=True, nogil=True, fastmath={"reassoc", "contract"})


@_jit
def _vertex(i, j, k, r0, r1, dense, tmask):
    if dense:
        return i + r0 * (j + r1 * k)
    h = (np.uint64(i) * _P1) ^ (np.uint64(j) * _P2) ^ (np.uint64(k) * _P3)
    return np.int64(h & tmask)


@_jit
def _cell(u, r):
    i = math.floor(u)
    if i < 0:
        i = 0
    if i > r - 2:
        i = r - 2
    return np.int64(i), u - i


@_jit_fast
def hash_forward(x, mins, voxels, res, dense, tables):
    n = x.shape[0]
    L, T, F = tables.shape
    tmask = np.uint64(T - 1)
    out = np.zeros((n, L * F))
    # Level-outer keeps one level's table hot in cache.
    for lv in range(L):
        v = voxels[lv]
        for p in range(n):
            i0, fx = _cell((x[p, 0] - mins[0]) / v, res[lv, 0])
            j0, fy = _cell((x[p, 1] - mins[1]) / v, res[lv, 1])
            k0, fz = _cell((x[p, 2] - mins[2]) / v, res[lv, 2])
            for c in range(8):
                di = c & 1
                dj = (c >> 1) & 1
                dk = (c >> 2) & 1
                w = (fx if di else 1.0 - fx) * (fy if dj else 1.0 - fy) * (fz if dk else 1.0 - fz)
                idx = _vertex(i0 + di, j0 + dj, k0 + dk, res[lv, 0], res[lv, 1], dense[lv], tmask)
                for f in range(F):
                    out[p, lv * F + f] += w * tables[lv, idx, f]
    return out


@_jit_fast
def hash_backward(x, mins, voxels, res, dense, tables, g_out, gtab, want_param, want_x):
    n = x.shape[0]
    L, T, F = tables.shape
    tmask = np.uint64(T - 1)
    gx = np.zeros((n, 3))
    for lv in range(L):
        v = voxels[lv]
        for p in range(n):
            i0, fx = _cell((x[p, 0] - mins[0]) / v, res[lv, 0])
            j0, fy = _cell((x[p, 1] - mins[1]) / v, res[lv, 1])
            k0, fz = _cell((x[p, 2] - mins[2]) / v, res[lv, 2])
            ax = 0.0
            ay = 0.0
            az = 0.0
            for c in range(8):
                di = c & 1
                dj = (c >> 1) & 1
                dk = (c >> 2) & 1
                wx = fx if di else 1.0 - fx
                wy = fy if dj else 1.0 - fy
                wz = fz if dk else 1.0 - fz
                idx = _vertex(i0 + di, j0 + dj, k0 + dk, res[lv, 0], res[lv, 1], dense[lv], tmask)
                if want_param:
                    w = wx * wy * wz
                    for f in range(F):
                        gtab[lv, idx, f] += w * g_out[p, lv * F + f]
                if want_x:
                    proj = 0.0
                    for f in range(F):
                        proj += tables[lv, idx, f] * g_out[p, lv * F + f]
                    ax += (proj if di else -proj) * wy * wz
                    ay += (proj if dj else -proj) * wx * wz
                    az += (proj if dk else -proj) * wx * wy
            if want_x:
                gx[p, 0] += ax / v
                gx[p, 1] += ay / v
                gx[p, 2] += az / v
    return gx


# Tri-plane axes: xy, xz, yz.
_PA = (0, 0, 1)
_PB = (1, 2, 2)


@_jit_fast
def triplane_forward(x, mins, cell, res, offsets, table):
    n = x.shape[0]
    C = table.shape[1]
    out = np.zeros((n, C))
    for p in range(n):
        for pl in range(3):
            a = _PA[pl]
            b = _PB[pl]
            ia, fa = _cell((x[p, a] - mins[a]) / cell, res[a])
            ib, fb = _cell((x[p, b] - mins[b]) / cell, res[b])
            base = offsets[pl]
            ra = res[a]
            for c in range(4):
                da = c & 1
                db = c >> 1
                w = (fa if da else 1.0 - fa) * (fb if db else 1.0 - fb)
                row = base + ia + da + ra * (ib + db)
                for ch in range(C):
                    out[p, ch] += w * table[row, ch]
    return out


@_jit_fast
def triplane_backward(x, mins, cell, res, offsets, table, g, gtable, want_param, want_x):
    n = x.shape[0]
    C = table.shape[1]
    gx = np.zeros((n, 3))
    for p in range(n):
        for pl in range(3):
            a = _PA[pl]
            b = _PB[pl]
            ia, fa = _cell((x[p, a] - mins[a]) / cell, res[a])
            ib, fb = _cell((x[p, b] - mins[b]) / cell, res[b])
            base = offsets[pl]
            ra = res[a]
            ga = 0.0
            gb = 0.0
            for c in range(4):
                da = c & 1
                db = c >> 1
                wa = fa if da else 1.0 - fa
                wb = fb if db else 1.0 - fb
                row = base + ia + da + ra * (ib + db)
                if want_param:
                    w = wa * wb
                    for ch in range(C):
                        gtable[row, ch] += w * g[p, ch]
                if want_x:
                    proj = 0.0
                    for ch in range(C):
                        proj += table[row, ch] * g[p, ch]
                    ga += (proj if da else -proj) * wb
                    gb += (proj if db else -proj) * wa
            if want_x:
                gx[p, a] += ga / cell
                gx[p, b] += gb / cell
    return gx


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@_jit
def oneblob_forward(u, bins, sigma, want_grad):
    n = u.shape[0]
    feat = np.empty((n, 3 * bins))
    dfeat = np.zeros((n, 3, bins)) if want_grad else np.zeros((0, 3, bins))
    scale = _INV_SQRT2 / sigma
    e = np.empty(bins + 1)
    t = np.empty(bins + 1)
    for p in range(n):
        for a in range(3):
            for k in range(bins + 1):
                t[k] = (k / bins - u[p, a]) * scale
                e[k] = math.erfc(abs(t[k]))
            for k in range(bins):
                lo = t[k]
                hi = t[k + 1]
                # erfc(|t|) keeps every case free of cancellation.
                if lo >= 0.0:
                    m = 0.5 * (e[k] - e[k + 1])
                elif hi <= 0.0:
                    m = 0.5 * (e[k + 1] - e[k])
                else:
                    m = 1.0 - 0.5 * (e[k] + e[k + 1])
                feat[p, a * bins + k] = m
            if want_grad:
                g_lo = math.exp(-t[0] * t[0])
                for k in range(bins):
                    g_hi = math.exp(-t[k + 1] * t[k + 1])
                    dfeat[p, a, k] = (g_lo - g_hi) * _INV_SQRT2PI / sigma
                    g_lo = g_hi
    return feat, dfeat
