"""One optimization iteration's objective: render a ray batch, score it, back-propagate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import RayBatch
from .config import Config
from .losses import (
    LossBreakdown,
    color_depth_loss,
    draw_patch_indices,
    loss_weights,
    patch_loss,
    sdf_losses,
    smoothness_loss,
    smoothness_region,
    total_loss,
)
from .renderer import PoseSet, RenderOutput, render, render_backward, sample_batch


@dataclass
class IterationSamples:
    """Every random choice of one iteration, so the objective is a pure function of parameters."""

    z: np.ndarray
    mask: np.ndarray
    patch_idx: np.ndarray | None
    patch_side: int
    smooth_origin: np.ndarray | None
    flags: list


def far_plane(cfg: Config, bounds) -> float:
    return cfg.render.far if cfg.render.far > 0 else bounds.diagonal


def draw_samples(batch: RayBatch, cfg: Config, scene, rng: np.random.Generator,
                 smooth: bool = True) -> IterationSamples:
    r = cfg.render
    z, mask = sample_batch(batch.gt_depth, batch.depth_valid, r.n_strat, r.n_surf, r.near,
                           far_plane(cfg, scene.bounds), r.truncation, rng)
    patch_idx, side, flags = None, 0, []
    if cfg.loss.patch_loss and cfg.loss.w_patch > 0:
        patch_idx, side, flags = draw_patch_indices(len(batch), cfg.loss.patch_side, cfg.loss.patch_reps, rng)
    origin = None
    if smooth and scene.hashgrid is not None and cfg.loss.w_smooth > 0:
        origin = smoothness_region(scene.hashgrid, cfg.loss.smooth_region, rng)
    return IterationSamples(z, mask, patch_idx, side, origin, flags)


def score_render(out: RenderOutput, batch: RayBatch, samples: IterationSamples, cfg: Config,
                 patch_idx=None, patch_side=None, smooth_value: float = 0.0):
    """Loss terms and their gradients w.r.t. rendered color, depth and SDF."""
    lc = cfg.loss
    l_color, l_depth, g_c, g_d, flags = color_depth_loss(
        out.color, out.depth, batch.gt_color, batch.gt_depth, batch.depth_valid
    )
    pidx = samples.patch_idx if patch_idx is None else patch_idx
    side = samples.patch_side if patch_side is None else patch_side
    l_patch, g_p = patch_loss(out.color, batch.gt_color, pidx, side, lc.ssim_c1, lc.ssim_c2)
    l_m, l_t, l_f, g_sdf, sflags = sdf_losses(
        out.z, out.sdf, batch.gt_depth, batch.depth_valid, out.mask, cfg.render.truncation, lc.mid_fraction
    )
    parts = LossBreakdown(l_color, l_depth, l_patch, smooth_value, l_m, l_t, l_f,
                          flags=flags + sflags + list(samples.flags))
    total_loss(parts, loss_weights(lc))
    return parts, (g_c, g_p, g_d, g_sdf)


def evaluate(scene, poses: PoseSet, batch: RayBatch, samples: IterationSamples, cfg: Config,
             backward: bool = False, scene_grads: bool = True, pose_grads: bool = True):
    """Render ``batch`` under ``poses`` and compute the weighted objective.

    With ``backward`` set, gradients are accumulated into ``scene.store``
    (when ``scene_grads``) and ``poses.store`` (when ``pose_grads``).

    Returns:
        ``(LossBreakdown, RenderOutput)``.
    """
    origins, directions = poses.world_rays(batch)
    x_grad = backward and pose_grads
    out = render(scene, origins, directions, batch.range_scale, samples.z, samples.mask, with_x_grad=x_grad)
    w = loss_weights(cfg.loss)
    smooth = 0.0
    if samples.smooth_origin is not None:
        smooth = smoothness_loss(scene.hashgrid, samples.smooth_origin, cfg.loss.smooth_region,
                                 weight=w["l_smooth"], backward=backward and scene_grads)
    parts, (g_c, g_p, g_d, g_sdf) = score_render(out, batch, samples, cfg, smooth_value=smooth)
    if backward:
        g_color = w["l_color"] * g_c + w["l_patch"] * g_p
        g_depth = w["l_depth"] * g_d
        g_sdf_direct = sum(w[k] * g_sdf[k] for k in ("l_sdfm", "l_sdft", "l_fs"))
        g_pts, step = render_backward(scene, out, g_color, g_depth, g_sdf_direct,
                                      param_grad=scene_grads, x_grad=x_grad)
        if x_grad:
            poses.backward(batch, g_pts, step)
    return parts, out


def per_frame_losses(out: RenderOutput, batch: RayBatch, samples: IterationSamples, cfg: Config,
                     rng: np.random.Generator) -> dict[int, float]:
    """Weighted total loss of each source frame's rays (smoothness excluded)."""
    result = {}
    for fid in np.unique(batch.frame_ids):
        sel = np.flatnonzero(batch.frame_ids == fid)
        sub_out = RenderOutput(out.color[sel], out.depth[sel], out.z[sel], out.mask[sel], out.sdf[sel],
                               out.raw_color[sel], out.sigma[sel], out.weights[sel], out.beta, {})
        pidx, side = None, 0
        if cfg.loss.patch_loss and cfg.loss.w_patch > 0:
            pidx, side, _ = draw_patch_indices(sel.size, cfg.loss.patch_side, cfg.loss.patch_reps, rng)
        sub_samples = IterationSamples(out.z[sel], out.mask[sel], pidx, side, None, [])
        parts, _ = score_render(sub_out, batch.subset(sel), sub_samples, cfg)
        result[int(fid)] = parts.total
    return result
