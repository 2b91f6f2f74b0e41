"""SDF-based volume rendering along camera rays.

Densities follow ``sigma = beta * sigmoid(-beta * sdf)`` and compositing uses
termination probabilities ``w_n = exp(-sum_{k<n} sigma_k) (1 - exp(-sigma_n))``
without an inter-sample distance factor, so the absolute density scale
absorbs the sample spacing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import Pose, RayBatch, right_jacobian, so3_exp
from .decoders import sigmoid
from .params import ParamStore


# Samples whose termination weight is below this skip the color branch; their
# contribution to the rendered color is under N * 1e-12.
COLOR_WEIGHT_CUTOFF = 1e-12


def sample_points(
    gt_depth: float,
    n_strat: int,
    n_surf: int,
    near: float,
    far: float,
    truncation: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Sorted sample depths for one ray.

    ``n_strat`` jittered stratified samples cover ``[near, far]``; when the
    measured depth is valid, ``n_surf`` jittered samples cover
    ``[d - T, d + T]``.
    """
    if not near < far:
        raise ValueError("near must be smaller than far")
    z = _stratified(np.array([near]), np.array([far]), n_strat, rng)[0]
    if gt_depth > 0 and n_surf > 0:
        lo = max(gt_depth - truncation, near)
        surf = _stratified(np.array([lo]), np.array([gt_depth + truncation]), n_surf, rng)[0]
        z = np.concatenate([z, surf])
    return np.sort(z)


def _stratified(lo: np.ndarray, hi: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    t = (np.arange(n) + rng.random((lo.shape[0], n))) / n
    return lo[:, None] + (hi - lo)[:, None] * t


def sample_batch(
    gt_depth: np.ndarray,
    valid: np.ndarray,
    n_strat: int,
    n_surf: int,
    near: float,
    far: float,
    truncation: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`sample_points` padded to a common width.

    Rays without valid depth get their surface slots parked at ``far`` and
    masked out, so they carry exactly ``n_strat`` live samples.

    Returns:
        ``(z, mask)``, both ``(n_rays, n_strat + n_surf)``, z sorted per row.
    """
    n = gt_depth.shape[0]
    z = _stratified(np.full(n, near), np.full(n, far), n_strat, rng)
    mask = np.ones((n, n_strat + n_surf), dtype=bool)
    if n_surf > 0:
        lo = np.maximum(gt_depth - truncation, near)
        surf = _stratified(lo, gt_depth + truncation, n_surf, rng)
        surf[~valid] = far
        z = np.concatenate([z, surf], axis=1)
        mask[:, n_strat:] = valid[:, None]
        order = np.argsort(z, axis=1, kind="stable")
        z = np.take_along_axis(z, order, 1)
        mask = np.take_along_axis(mask, order, 1)
    return z, mask


def sdf_to_density(sdf: np.ndarray, beta: float) -> np.ndarray:
    return beta * sigmoid(-beta * np.asarray(sdf, dtype=np.float64))


def density_derivatives(sdf: np.ndarray, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """``(d sigma / d sdf, d sigma / d beta)``."""
    s = sigmoid(-beta * sdf)
    ds = s * (1.0 - s)
    return -beta * beta * ds, s - beta * sdf * ds


def composite(sigma: np.ndarray, colors: np.ndarray, z: np.ndarray):
    """Termination weights, rendered color and rendered depth.

    Args:
        sigma: ``(n, N)`` densities, samples ordered by depth.
        colors: ``(n, N, 3)`` per-sample raw colors.
        z: ``(n, N)`` sample depths.

    Returns:
        ``(w, c, d)`` of shapes ``(n, N)``, ``(n, 3)``, ``(n,)``.
    """
    w = _weights(sigma)[0]
    return w, np.einsum("rn,rnc->rc", w, colors), np.einsum("rn,rn->r", w, z)


def _weights(sigma):
    acc = np.cumsum(sigma, axis=1) - sigma
    trans = np.exp(-acc)
    return trans * -np.expm1(-sigma), trans


def composite_backward(sigma, colors, z, g_color, g_depth):
    """Adjoints of :func:`composite` w.r.t. densities and per-sample colors."""
    w, trans = _weights(sigma)
    gw = np.einsum("rc,rnc->rn", g_color, colors) + g_depth[:, None] * z
    gwn = gw * w
    later = np.cumsum(gwn[:, ::-1], axis=1)[:, ::-1] - gwn
    g_sigma = gw * trans * np.exp(-sigma) - later
    g_colors = w[:, :, None] * g_color[:, None, :]
    return g_sigma, g_colors


@dataclass
class RenderOutput:
    color: np.ndarray  # (n, 3)
    depth: np.ndarray  # (n,)
    z: np.ndarray  # (n, N)
    mask: np.ndarray  # (n, N) live samples
    sdf: np.ndarray  # (n, N)
    raw_color: np.ndarray  # (n, N, 3)
    sigma: np.ndarray  # (n, N)
    weights: np.ndarray  # (n, N)
    beta: float
    cache: dict


def render(scene, origins, directions, range_scale, z, mask, with_x_grad: bool = False) -> RenderOutput:
    """Query the field at all samples and composite color and depth."""
    n, N = z.shape
    step = (z * range_scale[:, None])[..., None]
    pts = origins[:, None, :] + step * directions[:, None, :]
    field = scene.query(pts.reshape(-1, 3), with_x_grad=with_x_grad, color=False)
    sdf = field.sdf.reshape(n, N)
    beta = scene.beta
    sigma = sdf_to_density(sdf, beta) * mask
    w = _weights(sigma)[0]
    # Colors only matter where a sample can still terminate the ray.
    live = np.flatnonzero(w.reshape(-1) > COLOR_WEIGHT_CUTOFF)
    scene.add_color(field, live)
    raw = field.rgb.reshape(n, N, 3)
    w, c, d = composite(sigma, raw, z)
    return RenderOutput(c, d, z, mask, sdf, raw, sigma, w, beta, {"field": field, "step": step})


def render_backward(scene, out: RenderOutput, g_color, g_depth, g_sdf_direct=None,
                    param_grad: bool = True, x_grad: bool = False):
    """Back-propagate through compositing, density and the field.

    Returns:
        ``(g_points, step)`` where ``g_points`` is ``(n, N, 3)`` (None unless
        ``x_grad``) and ``step`` the per-sample ray length used to place points.
    """
    n, N = out.z.shape
    g_sigma, g_raw = composite_backward(out.sigma, out.raw_color, out.z, g_color, g_depth)
    g_sigma = g_sigma * out.mask
    dsdf, dbeta = density_derivatives(out.sdf, out.beta)
    g_sdf = g_sigma * dsdf
    if g_sdf_direct is not None:
        g_sdf = g_sdf + g_sdf_direct
    if param_grad:
        scene.store.grad("log_beta")[...] += out.beta * np.sum(g_sigma * dbeta)
    g_pts = scene.backward(out.cache["field"].cache, g_sdf.reshape(-1), g_raw.reshape(-1, 3),
                           param_grad=param_grad, x_grad=x_grad)
    if g_pts is not None:
        g_pts = g_pts.reshape(n, N, 3)
    return g_pts, out.cache["step"]


class PoseSet:
    """Pose increments for the frames of one optimization window.

    Each frame's pose is ``R = Exp(w) R0``, ``t = t0 + v`` on a frozen base
    pose ``(R0, t0)``; the increments ``(w, v)`` live in a ParamStore whose
    only group is ``pose``. Frames marked untrainable keep zero increments.
    """

    def __init__(self, frame_ids, base_poses: list[Pose], trainable=None):
        self.frame_ids = [int(f) for f in frame_ids]
        self.row = {fid: i for i, fid in enumerate(self.frame_ids)}
        self.base = list(base_poses)
        self.base_R = np.stack([p.rotation for p in base_poses]) if base_poses else np.zeros((0, 3, 3))
        self.base_t = np.stack([p.translation for p in base_poses]) if base_poses else np.zeros((0, 3))
        k = len(self.frame_ids)
        self.trainable = np.ones(k, dtype=bool) if trainable is None else np.asarray(trainable, dtype=bool)
        self.store = ParamStore()
        self.store.add("pose.delta", np.zeros((k, 6)), "pose")

    @property
    def delta(self) -> np.ndarray:
        return self.store.value("pose.delta")

    def rotations(self) -> np.ndarray:
        return np.stack([so3_exp(w) @ R0 for w, R0 in zip(self.delta[:, :3], self.base_R)])

    def translations(self) -> np.ndarray:
        return self.base_t + self.delta[:, 3:]

    def pose(self, frame_id: int) -> Pose:
        i = self.row[frame_id]
        if not self.trainable[i] or not np.any(self.delta[i]):
            return self.base[i]
        return Pose.from_rt(so3_exp(self.delta[i, :3]) @ self.base_R[i], self.base_t[i] + self.delta[i, 3:])

    def world_rays(self, batch: RayBatch) -> tuple[np.ndarray, np.ndarray]:
        rows = np.array([self.row[f] for f in batch.frame_ids], dtype=np.int64) if len(batch) else np.zeros(0, int)
        R = self.rotations()
        origins = self.translations()[rows]
        directions = np.einsum("rij,rj->ri", R[rows], batch.dirs_cam)
        return origins, directions

    def backward(self, batch: RayBatch, g_points: np.ndarray, step: np.ndarray) -> None:
        """Accumulate pose gradients given ``d loss / d point`` for every sample."""
        rows = np.array([self.row[f] for f in batch.frame_ids], dtype=np.int64)
        g_origin = g_points.sum(axis=1)
        g_dir = np.einsum("rn,rnc->rc", step[..., 0], g_points)
        k = len(self.frame_ids)
        E = np.stack([so3_exp(w) for w in self.delta[:, :3]])
        # Base direction a = R0 d_cam; d(Exp(w) a)/dw = -Exp(w) [a]x Jr(w).
        a = np.einsum("rij,rj->ri", self.base_R[rows], batch.dirs_cam)
        local = np.einsum("rji,rj->ri", E[rows], g_dir)
        cross = np.cross(a, local)
        g = self.store.grad("pose.delta")
        for c in range(3):
            g[:, 3 + c] += np.bincount(rows, weights=g_origin[:, c], minlength=k)
        per_frame = np.stack([np.bincount(rows, weights=cross[:, c], minlength=k) for c in range(3)], 1)
        for i in range(k):
            g[i, :3] += right_jacobian(self.delta[i, :3]).T @ per_frame[i]
        g[~self.trainable] = 0.0


RAY_DUMP_COLUMNS = ("ray", "u", "v", "sample", "z", "sdf", "sigma", "weight")


def dump_rays(path: str | Path, batch: RayBatch, out: RenderOutput) -> None:
    """Write a per-sample debug CSV with columns :data:`RAY_DUMP_COLUMNS`."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RAY_DUMP_COLUMNS)
        for r in range(out.z.shape[0]):
            u, v = batch.pixels[r]
            for s in np.flatnonzero(out.mask[r]):
                writer.writerow([r, int(u), int(v), int(s), repr(float(out.z[r, s])),
                                 repr(float(out.sdf[r, s])), repr(float(out.sigma[r, s])),
                                 repr(float(out.weights[r, s]))])
