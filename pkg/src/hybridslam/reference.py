"""Naive scalar-loop reference implementations.

These are deliberately written without vectorization, straight from the
definitions, and serve as oracles for the batched code in tests and in
the ``selftest`` command.
"""

from __future__ import annotations

import math

import numpy as np


def composite_loop(sigma, colors, z):
    """Sequential front-to-back accumulation for one ray."""
    n = len(sigma)
    w = [0.0] * n
    c = [0.0, 0.0, 0.0]
    d = 0.0
    acc = 0.0
    for i in range(n):
        wi = math.exp(-acc) * (1.0 - math.exp(-sigma[i]))
        w[i] = wi
        for k in range(3):
            c[k] += wi * colors[i][k]
        d += wi * z[i]
        acc += sigma[i]
    return np.array(w), np.array(c), d


def color_depth_loop(color, depth, gt_color, gt_depth, valid):
    n = len(color)
    sc = 0.0
    for i in range(n):
        for k in range(3):
            sc += (color[i][k] - gt_color[i][k]) ** 2
    l_color = sc / (3 * n) if n else 0.0
    sd, nv = 0.0, 0
    for i in range(n):
        if valid[i]:
            sd += (depth[i] - gt_depth[i]) ** 2
            nv += 1
    return l_color, (sd / nv if nv else 0.0)


def _window_ssim(xs, ys, c1, c2):
    k = len(xs)
    mx = sum(xs) / k
    my = sum(ys) / k
    vx = sum((a - mx) ** 2 for a in xs) / k
    vy = sum((b - my) ** 2 for b in ys) / k
    cxy = sum((a - mx) * (b - my) for a, b in zip(xs, ys)) / k
    return (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim_dense_map(x, y, c1, c2, kernel: int = 3):
    """SSIM of every ``kernel x kernel`` window, indexed by top-left corner."""
    s, _, C = np.shape(x)
    out = np.zeros((s - kernel + 1, s - kernel + 1, C))
    for ch in range(C):
        for i in range(s - kernel + 1):
            for j in range(s - kernel + 1):
                xs = [x[i + a][j + b][ch] for a in range(kernel) for b in range(kernel)]
                ys = [y[i + a][j + b][ch] for a in range(kernel) for b in range(kernel)]
                out[i, j, ch] = _window_ssim(xs, ys, c1, c2)
    return out


def ssim_strided_reference(x, y, c1, c2, kernel: int = 3, stride: int = 4) -> float:
    dense = ssim_dense_map(x, y, c1, c2, kernel)
    return float(dense[::stride, ::stride].mean())


def patch_loss_reference(color, gt_color, patch_idx, side, c1, c2) -> float:
    total = 0.0
    for sel in patch_idx:
        x = [[color[sel[r * side + q]] for q in range(side)] for r in range(side)]
        y = [[gt_color[sel[r * side + q]] for q in range(side)] for r in range(side)]
        total += ssim_strided_reference(np.array(x), np.array(y), c1, c2)
    return 1.0 - total / len(patch_idx)


def sdf_losses_loop(z, sdf, gt_depth, valid, mask, T, mid_fraction=0.5):
    """Per-point loops for the middle, tail and free-space SDF terms."""
    sums = {"m": 0.0, "t": 0.0, "f": 0.0}
    rays = {"m": 0, "t": 0, "f": 0}
    for r in range(len(z)):
        if not valid[r]:
            continue
        acc = {"m": [0.0, 0], "t": [0.0, 0], "f": [0.0, 0]}
        D = gt_depth[r]
        for n in range(len(z[r])):
            if not mask[r][n]:
                continue
            dist = abs(z[r][n] - D)
            if dist < T:
                key = "m" if dist < mid_fraction * T else "t"
                res = sdf[r][n] * T + z[r][n] - D
                acc[key][0] += res * res
                acc[key][1] += 1
            elif z[r][n] <= D - T:
                acc["f"][0] += (sdf[r][n] - 1.0) ** 2
                acc["f"][1] += 1
        for key, (s, cnt) in acc.items():
            if cnt:
                sums[key] += s / cnt
                rays[key] += 1
    return tuple(sums[k] / rays[k] if rays[k] else 0.0 for k in ("m", "t", "f"))


def depth_l1_loop(rendered, gt) -> float:
    s, n = 0.0, 0
    for a, b in zip(rendered, gt):
        if b > 0:
            s += abs(a - b)
            n += 1
    return s / n * 100.0


def oneblob_loop(u: float, bins: int, sigma: float) -> list[float]:
    """Gaussian mass of each bin for one normalized coordinate."""
    out = []
    for k in range(bins):
        lo = (k / bins - u) / (sigma * math.sqrt(2.0))
        hi = ((k + 1) / bins - u) / (sigma * math.sqrt(2.0))
        out.append(0.5 * (math.erf(hi) - math.erf(lo)))
    return out


def bilinear_loop(plane, a: float, b: float) -> np.ndarray:
    """``plane[ib][ia]`` bilinear lookup at continuous vertex coordinates (a, b)."""
    rb, ra = len(plane), len(plane[0])
    ia = min(max(int(math.floor(a)), 0), ra - 2)
    ib = min(max(int(math.floor(b)), 0), rb - 2)
    fa, fb = a - ia, b - ib
    return (
        (1 - fa) * (1 - fb) * np.asarray(plane[ib][ia])
        + fa * (1 - fb) * np.asarray(plane[ib][ia + 1])
        + (1 - fa) * fb * np.asarray(plane[ib + 1][ia])
        + fa * fb * np.asarray(plane[ib + 1][ia + 1])
    )


def triplane_loop(planes, x, min_corner, cell: float) -> np.ndarray:
    """Sum of the xy, xz and yz bilinear lookups for one point and one level."""
    u = [(x[k] - min_corner[k]) / cell for k in range(3)]
    out = 0.0
    for plane, (a, b) in zip(planes, ((0, 1), (0, 2), (1, 2))):
        out = out + bilinear_loop(plane, u[a], u[b])
    return out


def hash_index_loop(ijk, res, dense: bool, table_size: int) -> int:
    i, j, k = (int(v) for v in ijk)
    if dense:
        return i + int(res[0]) * (j + int(res[1]) * k)
    h = ((i * 73856093) ^ (j * 19349663) ^ (k * 83492791)) & 0xFFFFFFFFFFFFFFFF
    return h & (table_size - 1)


def hashgrid_loop(grid, x) -> np.ndarray:
    """Trilinear hash-grid lookup of one clamped point, level by level."""
    tables = grid.tables()
    feats = []
    for lv, info in enumerate(grid.levels_info):
        u = [(x[k] - grid.bounds.min_corner[k]) / info.voxel for k in range(3)]
        i0 = [min(max(int(math.floor(u[k])), 0), int(info.res[k]) - 2) for k in range(3)]
        f = [u[k] - i0[k] for k in range(3)]
        acc = np.zeros(grid.features)
        for di in (0, 1):
            for dj in (0, 1):
                for dk in (0, 1):
                    w = (f[0] if di else 1 - f[0]) * (f[1] if dj else 1 - f[1]) * (f[2] if dk else 1 - f[2])
                    idx = hash_index_loop((i0[0] + di, i0[1] + dj, i0[2] + dk), info.res, info.dense,
                                          grid.table_size)
                    acc = acc + w * tables[lv, idx]
        feats.append(acc)
    return np.concatenate(feats)
