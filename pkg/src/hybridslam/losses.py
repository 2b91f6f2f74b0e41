"""Training objectives and their adjoints.

Each loss returns its value together with the gradient w.r.t. its rendered
inputs; weighting happens in :func:`total_loss` and the objective driver.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

TERMS = ("l_color", "l_depth", "l_patch", "l_smooth", "l_sdfm", "l_sdft", "l_fs")


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term: str):
        super().__init__(f"loss term {term} is not finite")
        self.term = term


@dataclass
class LossBreakdown:
    l_color: float = 0.0
    l_depth: float = 0.0
    l_patch: float = 0.0
    l_smooth: float = 0.0
    l_sdfm: float = 0.0
    l_sdft: float = 0.0
    l_fs: float = 0.0
    weights: dict = field(default_factory=dict)
    total: float = 0.0
    flags: list = field(default_factory=list)

    def terms(self) -> dict:
        return {t: getattr(self, t) for t in TERMS}


def loss_weights(loss_cfg) -> dict:
    w = {
        "l_color": loss_cfg.w_color,
        "l_depth": loss_cfg.w_depth,
        "l_patch": loss_cfg.w_patch if loss_cfg.patch_loss else 0.0,
        "l_smooth": loss_cfg.w_smooth,
        "l_sdfm": loss_cfg.w_sdfm,
        "l_sdft": loss_cfg.w_sdft,
        "l_fs": loss_cfg.w_fs,
    }
    return w


def total_loss(parts: LossBreakdown, weights: dict | None = None) -> float:
    """Weighted sum of the seven terms; stores weights and total on ``parts``."""
    if weights is not None:
        parts.weights = dict(weights)
    for term in TERMS:
        if not np.isfinite(getattr(parts, term)):
            raise NonFiniteLoss(term)
    parts.total = float(sum(parts.weights.get(t, 0.0) * getattr(parts, t) for t in TERMS))
    return parts.total


def color_depth_loss(color, depth, gt_color, gt_depth, valid):
    """Mean squared color error (channel mean) and depth error over valid rays.

    Returns:
        ``(l_color, l_depth, g_color, g_depth, flags)``.
    """
    n = color.shape[0]
    flags = []
    dc = color - gt_color
    l_color = float(np.mean(dc * dc)) if n else 0.0
    g_color = 2.0 * dc / max(dc.size, 1)
    nv = int(valid.sum())
    dd = np.where(valid, depth - gt_depth, 0.0)
    if nv == 0:
        flags.append("no_valid_depth")
        return l_color, 0.0, g_color, np.zeros(n), flags
    l_depth = float(np.sum(dd * dd) / nv)
    return l_color, l_depth, g_color, 2.0 * dd / nv, flags


# ---- structural (patch) loss -------------------------------------------------


def draw_patch_indices(n_rays: int, side: int, reps: int, rng: np.random.Generator):
    """``reps`` draws of ``side**2`` distinct ray indices.

    If the batch is too small the side shrinks to ``floor(sqrt(n_rays))``.

    Returns:
        ``(indices (reps, side*side), side, flags)``.
    """
    flags = []
    if side * side > n_rays:
        side = int(np.floor(np.sqrt(n_rays)))
        flags.append("patch_shrunk")
    if side < 3:
        return None, side, flags + ["patch_too_small"]
    idx = np.stack([rng.choice(n_rays, side * side, replace=False) for _ in range(reps)])
    return idx, side, flags


def ssim_strided(x: np.ndarray, y: np.ndarray, c1: float, c2: float, kernel: int = 3, stride: int = 4):
    """Mean SSIM of ``x`` against ``y`` over uniform windows at a stride.

    ``x`` and ``y`` are ``(s, s, C)``; windows are ``kernel x kernel`` with
    top-left corners at ``0, stride, 2*stride, ...`` that fit inside the
    patch. Statistics use population (1/k^2) normalization. The mean runs
    over windows and channels.

    Returns:
        ``(ssim, d ssim / d x)``.
    """
    s = x.shape[0]
    starts = np.arange(0, s - kernel + 1, stride)
    k2 = kernel * kernel
    # Gather windows: (nw, nw, k, k, C).
    ii = starts[:, None] + np.arange(kernel)[None, :]
    xw = x[ii[:, None, :, None], ii[None, :, None, :]]
    yw = y[ii[:, None, :, None], ii[None, :, None, :]]
    mx = xw.mean(axis=(2, 3))
    my = yw.mean(axis=(2, 3))
    vx = (xw * xw).mean(axis=(2, 3)) - mx * mx
    vy = (yw * yw).mean(axis=(2, 3)) - my * my
    cxy = (xw * yw).mean(axis=(2, 3)) - mx * my
    a1 = 2 * mx * my + c1
    a2 = 2 * cxy + c2
    b1 = mx * mx + my * my + c1
    b2 = vx + vy + c2
    ssim_map = a1 * a2 / (b1 * b2)
    count = ssim_map.size
    value = float(ssim_map.mean())
    # Partial derivatives of each window's SSIM.
    d_mx = a2 / b2 * (2 * my * b1 - a1 * 2 * mx) / (b1 * b1)
    d_vx = -ssim_map / b2
    d_cxy = 2 * a1 / (b1 * b2)
    dxw = (
        d_mx[:, :, None, None] / k2
        + d_vx[:, :, None, None] * 2 * (xw - mx[:, :, None, None]) / k2
        + d_cxy[:, :, None, None] * (yw - my[:, :, None, None]) / k2
    ) / count
    grad = np.zeros_like(x)
    # Windows never overlap when stride >= kernel, but accumulate to be safe.
    np.add.at(grad, (ii[:, None, :, None], ii[None, :, None, :]), dxw)
    return value, grad


def patch_loss(color, gt_color, patch_idx, side: int, c1: float, c2: float):
    """One minus the mean SSIM over the drawn patches.

    Returns:
        ``(l_patch, g_color)``.
    """
    g = np.zeros_like(color)
    if patch_idx is None:
        return 0.0, g
    M = patch_idx.shape[0]
    total = 0.0
    for m in range(M):
        sel = patch_idx[m]
        x = color[sel].reshape(side, side, -1)
        y = gt_color[sel].reshape(side, side, -1)
        val, gx = ssim_strided(x, y, c1, c2)
        total += val
        np.add.at(g, sel, -gx.reshape(side * side, -1) / M)
    return 1.0 - total / M, g


# ---- hash grid smoothness ------------------------------------------------------


def smoothness_region(grid, size: int, rng: np.random.Generator) -> np.ndarray:
    """Random corner (finest-level vertex index) of a ``size^3`` vertex region."""
    res = grid.levels_info[-1].res
    hi = np.maximum(res - size - 1, 0)
    return np.array([rng.integers(0, h + 1) for h in hi], dtype=np.int64)


def smoothness_points(grid, origin: np.ndarray, size: int) -> np.ndarray:
    """Vertex positions ``v`` of the region followed by ``v + e_x``, ``v + e_y``, ``v + e_z``."""
    r = np.arange(size)
    ijk = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3) + origin
    steps = [np.zeros(3, dtype=np.int64)] + [np.eye(3, dtype=np.int64)[a] for a in range(3)]
    all_ijk = np.concatenate([ijk + s for s in steps])
    pts = grid.bounds.min_corner + all_ijk * grid.finest_voxel
    return np.minimum(pts, grid.bounds.max_corner)


def smoothness_loss(grid, origin: np.ndarray, size: int, weight: float = 1.0, backward: bool = False):
    """Mean over the region of squared feature differences to the +x/+y/+z neighbours.

    With ``backward`` set, ``weight`` times the gradient is accumulated into
    the hash tables.
    """
    pts = smoothness_points(grid, origin, size)
    feat, cache = grid.encode(pts)
    n = size**3
    base = feat[:n]
    deltas = [feat[(a + 1) * n : (a + 2) * n] - base for a in range(3)]
    value = float(sum(np.sum(d * d) for d in deltas) / n)
    if backward and weight != 0.0:
        g = np.zeros_like(feat)
        for a, d in enumerate(deltas):
            g[(a + 1) * n : (a + 2) * n] = 2.0 * d / n
            g[:n] -= 2.0 * d / n
        grid.backward(cache, weight * g, param_grad=True, x_grad=False)
    return value


# ---- SDF supervision -------------------------------------------------------------


def sdf_sets(z, gt_depth, valid, mask, truncation: float, mid_fraction: float):
    """Boolean masks ``(middle, tail, free)`` over samples ``(n, N)``.

    Free-space samples lie on the camera side only: ``z <= D - T``.
    """
    D = gt_depth[:, None]
    live = mask & valid[:, None]
    dist = np.abs(z - D)
    trunc = live & (dist < truncation)
    middle = trunc & (dist < mid_fraction * truncation)
    tail = trunc & ~middle
    free = live & (z <= D - truncation)
    return middle, tail, free


def _per_ray_mean(sq, members, scale_grad):
    counts = members.sum(axis=1)
    rays = counts > 0
    n_rays = int(rays.sum())
    if n_rays == 0:
        return 0.0, np.zeros_like(sq), False
    inv = np.where(rays, 1.0 / np.maximum(counts, 1), 0.0)[:, None]
    value = float(np.sum(np.where(members, sq, 0.0) * inv) / n_rays)
    grad = np.where(members, scale_grad, 0.0) * inv / n_rays
    return value, grad, True


def sdf_losses(z, sdf, gt_depth, valid, mask, truncation: float, mid_fraction: float = 0.5):
    """Truncation-band and free-space SDF losses.

    The band residual is ``sdf * T + z - D``, squared, averaged per ray and
    then over rays that have at least one sample in the set.

    Returns:
        ``(l_sdfm, l_sdft, l_fs, grads, flags)`` where ``grads`` maps each
        term to ``d term / d sdf`` of shape ``(n, N)``.
    """
    middle, tail, free = sdf_sets(z, gt_depth, valid, mask, truncation, mid_fraction)
    res = sdf * truncation + z - gt_depth[:, None]
    flags = []
    l_m, g_m, ok_m = _per_ray_mean(res * res, middle, 2.0 * res * truncation)
    l_t, g_t, ok_t = _per_ray_mean(res * res, tail, 2.0 * res * truncation)
    fs = sdf - 1.0
    l_f, g_f, ok_f = _per_ray_mean(fs * fs, free, 2.0 * fs)
    for name, ok in (("empty_sdf_middle", ok_m), ("empty_sdf_tail", ok_t), ("empty_free_space", ok_f)):
        if not ok:
            flags.append(name)
    return l_m, l_t, l_f, {"l_sdfm": g_m, "l_sdft": g_t, "l_fs": g_f}, flags
