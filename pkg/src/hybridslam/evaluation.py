"""Trajectory and reconstruction metrics, mesh extraction and PLY I/O."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .camera import Frame, Pose, generate_rays
from .config import Config
from .objective import far_plane
from .renderer import render, sample_batch
from .tum import associate

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


# ---- trajectory ------------------------------------------------------------------


def align_rigid(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares ``R, t`` (no scale) minimizing ``|R src + t - dst|``."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    S = np.eye(3)
    S[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ S @ U.T
    return R, mu_d - R @ mu_s


def ate_rmse(est_t, est_poses, gt_t, gt_poses, tol: float = 0.02) -> float:
    """ATE RMSE in cm after rigid alignment of the estimated positions onto GT."""
    est_t, gt_t = np.asarray(est_t, float), np.asarray(gt_t, float)
    idx = associate(est_t, gt_t, tol)
    ok = np.flatnonzero(idx >= 0)
    if ok.size < 3:
        raise EvaluationError(f"need at least 3 associated poses, got {ok.size}")
    est = np.stack([est_poses[i].translation for i in ok])
    gt = np.stack([gt_poses[idx[i]].translation for i in ok])
    R, t = align_rigid(est, gt)
    res = est @ R.T + t - gt
    return float(np.sqrt(np.mean(np.sum(res * res, axis=1))) * 100.0)


# ---- depth ---------------------------------------------------------------------------


def depth_l1_values(rendered: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute difference over pixels with valid (> 0) GT depth, in cm."""
    valid = gt > 0
    if not valid.any():
        raise EvaluationError("no valid depth pixels")
    return float(np.mean(np.abs(rendered[valid] - gt[valid])) * 100.0)


def render_depth(scene, cfg: Config, frame: Frame, pose: Pose, pixel_stride: int = 4,
                 seed: int = 0, chunk: int = 2000):
    """Rendered and GT depth at every ``pixel_stride``-th pixel of a frame.

    Samples are drawn exactly as in training (stratified plus near the
    measured depth), so the rendered depth is the one the losses see.
    """
    K = frame.intrinsics
    v, u = np.mgrid[0 : K.height : pixel_stride, 0 : K.width : pixel_stride]
    idx = (v * K.width + u).reshape(-1)
    batch = generate_rays(frame, idx, pose, max_depth=cfg.render.max_depth)
    rng = np.random.default_rng(seed)
    r = cfg.render
    out = np.zeros(len(batch))
    for s in range(0, len(batch), chunk):
        b = batch.subset(slice(s, s + chunk))
        z, mask = sample_batch(b.gt_depth, b.depth_valid, r.n_strat, r.n_surf, r.near,
                               far_plane(cfg, scene.bounds), r.truncation, rng)
        out[s : s + chunk] = render(scene, b.origins, b.directions, b.range_scale, z, mask).depth
    return out, batch.gt_depth


def depth_l1(scene, cfg: Config, frames: list[Frame], poses: list[Pose], pixel_stride: int = 4,
             seed: int = 0) -> float:
    rendered, gt = [], []
    for f, p in zip(frames, poses):
        d, g = render_depth(scene, cfg, f, p, pixel_stride, seed + f.frame_id)
        rendered.append(d)
        gt.append(g)
    return depth_l1_values(np.concatenate(rendered), np.concatenate(gt))


def held_out(n: int, stride: int, offset: int) -> list[int]:
    return [i for i in range(n) if i % stride == offset % stride]


# ---- meshes ------------------------------------------------------------------------------


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int

    @property
    def empty(self) -> bool:
        return self.faces.shape[0] == 0

    def area(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def centroids(self) -> np.ndarray:
        return self.vertices[self.faces].mean(axis=1)

    def submesh(self, keep: np.ndarray) -> "Mesh":
        faces = self.faces[keep]
        used, inv = np.unique(faces, return_inverse=True)
        return Mesh(self.vertices[used], inv.reshape(-1, 3))


def marching_cubes_grid(sdf_grid: np.ndarray, origin, step: float) -> Mesh:
    """Zero level set of a sampled SDF; empty mesh when it has no crossing."""
    if not (sdf_grid.min() < 0.0 < sdf_grid.max()):
        log.warning("SDF has no zero crossing; mesh is empty")
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = marching_cubes(sdf_grid, level=0.0, spacing=(step, step, step))
    return Mesh(verts + np.asarray(origin, dtype=np.float64), faces.astype(np.int64))


def sample_sdf_grid(sdf_fn, lo, hi, step: float, chunk: int = 1 << 16):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    n = np.floor((hi - lo) / step + 1e-9).astype(int) + 1
    axes = [lo[a] + step * np.arange(n[a]) for a in range(3)]
    grid = np.empty(tuple(n))
    flat = grid.reshape(-1)
    # Points in C order matching the grid layout, generated chunk by chunk.
    total = flat.size
    for s in range(0, total, chunk):
        ids = np.arange(s, min(s + chunk, total))
        i, rem = np.divmod(ids, n[1] * n[2])
        j, k = np.divmod(rem, n[2])
        pts = np.stack([axes[0][i], axes[1][j], axes[2][k]], -1)
        flat[s : s + ids.size] = sdf_fn(pts)
    return grid


def observed_mask(points: np.ndarray, frames: list[Frame], poses: list[Pose], margin: float,
                  max_depth: float = np.inf) -> np.ndarray:
    """Points inside some camera frustum and not behind that view's measured surface."""
    seen = np.zeros(points.shape[0], dtype=bool)
    for f, pose in zip(frames, poses):
        K = f.intrinsics
        pc = (points - pose.translation) @ pose.rotation
        z = pc[:, 2]
        front = z > 1e-6
        u = np.full(z.shape, -1.0)
        v = np.full(z.shape, -1.0)
        u[front] = K.fx * pc[front, 0] / z[front] + K.cx
        v[front] = K.fy * pc[front, 1] / z[front] + K.cy
        ui, vi = np.round(u).astype(np.int64), np.round(v).astype(np.int64)
        inside = front & (ui >= 0) & (ui < K.width) & (vi >= 0) & (vi < K.height) & (z <= max_depth)
        d = np.zeros(z.shape)
        d[inside] = f.depth[vi[inside], ui[inside]]
        seen |= inside & (d > 0) & (z <= d + margin)
    return seen


def extract_mesh(sdf_fn, lo, hi, resolution: float = 0.02, frames=None, poses=None, margin: float = 0.06,
                 max_depth: float = np.inf) -> Mesh:
    """Marching cubes on ``sdf_fn`` over a box, then optional visibility culling."""
    grid = sample_sdf_grid(sdf_fn, lo, hi, resolution)
    mesh = marching_cubes_grid(grid, lo, resolution)
    if mesh.empty or not frames:
        return mesh
    return cull_mesh(mesh, frames, poses, margin, max_depth)


def cull_mesh(mesh: Mesh, frames, poses, margin: float, max_depth: float = np.inf) -> Mesh:
    keep = observed_mask(mesh.centroids(), frames, poses, margin, max_depth)
    return mesh.submesh(keep)


def sample_surface(mesh: Mesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    if mesh.empty:
        raise EvaluationError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    area = mesh.area()
    tri = rng.choice(area.size, size=n, p=area / area.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    a, b, c = (mesh.vertices[mesh.faces[tri, k]] for k in range(3))
    return (1 - s)[:, None] * a + (s * (1 - r2))[:, None] * b + (s * r2)[:, None] * c


@dataclass
class MeshMetrics:
    accuracy_cm: float
    completion_cm: float
    completion_rate_pct: float
    depth_l1_cm: float = float("nan")


def point_metrics(pred_pts: np.ndarray, gt_pts: np.ndarray, threshold_cm: float = 5.0) -> MeshMetrics:
    d_acc, _ = cKDTree(gt_pts).query(pred_pts)
    d_comp, _ = cKDTree(pred_pts).query(gt_pts)
    return MeshMetrics(
        float(d_acc.mean() * 100.0),
        float(d_comp.mean() * 100.0),
        float(np.mean(d_comp * 100.0 < threshold_cm) * 100.0),
    )


def mesh_metrics(pred: Mesh, gt: Mesh, samples: int = 200000, threshold_cm: float = 5.0,
                 seed: int = 0) -> MeshMetrics:
    if pred.empty:
        raise EvaluationError("predicted mesh is empty")
    if gt.empty:
        raise EvaluationError("ground-truth mesh is empty")
    return point_metrics(sample_surface(pred, samples, seed), sample_surface(gt, samples, seed), threshold_cm)


# ---- PLY ----------------------------------------------------------------------------------
# ASCII PLY: "ply", "format ascii 1.0", "element vertex V" with float x/y/z,
# "element face F" with "property list uchar int vertex_indices", "end_header".


def write_ply(path: str | Path, mesh: Mesh) -> None:
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {mesh.vertices.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {mesh.faces.shape[0]}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.astype(float).tolist()]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path: str | Path) -> Mesh:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise EvaluationError(f"{path}: not a PLY file")
    nv = nf = 0
    for i, line in enumerate(text):
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            nv = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            nf = int(parts[2])
        elif parts == ["format", "binary_little_endian", "1.0"]:
            raise EvaluationError(f"{path}: only ASCII PLY is supported")
        elif parts == ["end_header"]:
            body = text[i + 1 :]
            break
    else:
        raise EvaluationError(f"{path}: missing end_header")
    verts = np.array([[float(v) for v in ln.split()[:3]] for ln in body[:nv]]).reshape(nv, 3)
    faces = np.array([[int(v) for v in ln.split()[1:4]] for ln in body[nv : nv + nf]], dtype=np.int64)
    return Mesh(verts, faces.reshape(nf, 3))
