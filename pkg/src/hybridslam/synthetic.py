"""Analytic-SDF box room used as a ground-truth test scene.

The room interior is free space (positive SDF); walls, two boxes and a
sphere are solid. Every primitive distance is exact, so the union is
Lipschitz-1 and sphere tracing is safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraIntrinsics, Frame, Pose
from .config import Config


@dataclass(frozen=True)
class Box:
    center: tuple
    half: tuple

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0)


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius


@dataclass
class SyntheticScene:
    """Room interior ``[room_min, room_max]`` plus solid obstacles.

    ``room_min`` / ``room_max`` may be None for an open scene (only the
    obstacles exist, rays can escape).
    """

    room_min: tuple | None = (-2.0, -1.5, 0.0)
    room_max: tuple | None = (2.0, 1.5, 2.5)
    obstacles: list = field(
        default_factory=lambda: [
            Box((1.1, 0.7, 0.4), (0.3, 0.3, 0.4)),
            Box((-1.1, -0.6, 0.3), (0.4, 0.25, 0.3)),
            Sphere((0.0, 0.95, 0.55), 0.3),
        ]
    )
    checker: float = 0.25
    # Ray marching leaves this box -> miss.
    trace_bounds: tuple = ((-6.0, -6.0, -6.0), (6.0, 6.0, 6.0))

    def sdf(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        d = np.full(p.shape[:-1], np.inf)
        if self.room_min is not None:
            lo, hi = np.asarray(self.room_min), np.asarray(self.room_max)
            d = np.minimum((p - lo).min(axis=-1), (hi - p).min(axis=-1))
        for ob in self.obstacles:
            d = np.minimum(d, ob.sdf(p))
        return d

    def color(self, p: np.ndarray) -> np.ndarray:
        """Checkerboard modulated by a position gradient, in [0.1, 0.9]."""
        p = np.asarray(p, dtype=np.float64)
        # Half-cell phase keeps axis-aligned walls off the checker edges.
        cells = np.floor((p + 0.5 * self.checker) / self.checker).astype(np.int64)
        check = (cells.sum(axis=-1) % 2).astype(np.float64)
        lo = np.array([-2.0, -1.5, 0.0])
        span = np.array([4.0, 3.0, 2.5])
        grad = np.clip((p - lo) / span, 0.0, 1.0)
        return 0.1 + 0.8 * (0.35 * grad + 0.65 * check[..., None] * (0.4 + 0.6 * grad[..., ::-1]))

    def trace(self, origins: np.ndarray, dirs: np.ndarray, tol: float = 1e-5, max_steps: int = 256):
        """Sphere-trace unit rays; returns ray length ``t`` and a hit mask."""
        n = origins.shape[0]
        t = np.zeros(n)
        hit = np.zeros(n, dtype=bool)
        active = np.ones(n, dtype=bool)
        lo, hi = (np.asarray(b) for b in self.trace_bounds)
        for _ in range(max_steps):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            p = origins[idx] + t[idx, None] * dirs[idx]
            d = self.sdf(p)
            done = np.abs(d) < tol
            hit[idx[done]] = True
            escaped = np.any((p < lo) | (p > hi), axis=-1) & ~done
            active[idx[done | escaped]] = False
            step = idx[~done & ~escaped]
            t[step] += np.abs(d[~done & ~escaped])
        return t, hit


def orbit_poses(n: int, radius: float = 1.1, height: float = 1.3, arc_deg: float = 45.0,
                center=(0.0, 0.0), target_z: float = 0.7) -> list[Pose]:
    """Camera-to-world poses on a circular arc, looking at the room center.

    The camera starts and stops at rest (cosine easing) and bobs slightly
    so the motion is not planar.
    """
    poses = []
    for i in range(n):
        s = 0.5 - 0.5 * np.cos(np.pi * i / max(n - 1, 1))
        a = np.deg2rad(-0.5 * arc_deg + arc_deg * s)
        eye = np.array([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a),
                        height + 0.05 * np.sin(2 * np.pi * s)])
        target = np.array([0.0, 0.0, target_z])
        poses.append(look_at(eye, target))
    return poses


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> Pose:
    z = target - eye
    z = z / np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)  # image y points down
    return Pose.from_rt(np.stack([x, y, z], 1), eye)


def render_synthetic_frame(scene: SyntheticScene, pose: Pose, K: CameraIntrinsics):
    """RGB in [0, 1] and planar depth in meters (0 where the ray escapes)."""
    v, u = np.mgrid[0 : K.height, 0 : K.width]
    dirs, scale = K.pixel_rays(u.reshape(-1).astype(np.float64), v.reshape(-1).astype(np.float64))
    R = pose.rotation
    wd = dirs @ R.T
    origins = np.broadcast_to(pose.translation, wd.shape)
    t, hit = scene.trace(origins, wd)
    depth = np.where(hit, t / scale, 0.0)
    pts = origins + t[:, None] * wd
    rgb = np.where(hit[:, None], scene.color(pts), 0.0)
    return rgb.reshape(K.height, K.width, 3), depth.reshape(K.height, K.width)


def intrinsics_from_config(cfg: Config) -> CameraIntrinsics:
    s = cfg.synth
    return CameraIntrinsics(s.fx, s.fy, s.cx, s.cy, s.width, s.height, s.depth_scale)


def make_sequence(cfg: Config, scene: SyntheticScene | None = None, n_frames: int | None = None) -> list[Frame]:
    """Render the default orbit. Images are quantized like the stored dataset."""
    scene = scene or SyntheticScene()
    K = intrinsics_from_config(cfg)
    n = n_frames or cfg.synth.n_frames
    frames = []
    for i, pose in enumerate(orbit_poses(cfg.synth.n_frames)[:n]):
        rgb, depth = render_synthetic_frame(scene, pose, K)
        rgb8 = np.round(rgb * 255.0).astype(np.uint8)
        draw = np.round(depth * K.depth_scale).astype(np.uint16)
        frames.append(Frame(i, i / cfg.synth.fps, rgb8 / 255.0, draw / K.depth_scale, K, pose))
    return frames


# ---- ground-truth mesh -------------------------------------------------------


def _quad(a, b, c, d):
    return [(a, b, c), (a, c, d)]


def _grid_quad(origin, eu, ev, n: int):
    """``n x n`` subdivided rectangle (keeps triangles small for culling)."""
    verts, tris = [], []
    for i in range(n + 1):
        for j in range(n + 1):
            verts.append(origin + eu * (i / n) + ev * (j / n))
    for i in range(n):
        for j in range(n):
            a = i * (n + 1) + j
            tris += _quad(a, a + n + 1, a + n + 2, a + 1)
    return np.array(verts), np.array(tris)


def ground_truth_mesh(scene: SyntheticScene, subdiv: int = 20, sphere_res: int = 48):
    """Triangle mesh of every solid surface bounding the free space.

    Box faces lying on the floor are dropped since they bound no free space.
    """
    parts = []
    if scene.room_min is not None:
        lo, hi = np.asarray(scene.room_min, float), np.asarray(scene.room_max, float)
        parts += _box_faces(lo, hi, subdiv, floor=lo[2], skip_floor=False)
    floor = scene.room_min[2] if scene.room_min is not None else None
    for ob in scene.obstacles:
        if isinstance(ob, Box):
            c, h = np.asarray(ob.center), np.asarray(ob.half)
            parts += _box_faces(c - h, c + h, max(subdiv // 4, 2), floor=floor, skip_floor=True)
        elif isinstance(ob, Sphere):
            parts.append(_uv_sphere(np.asarray(ob.center), ob.radius, sphere_res))
    verts, faces, off = [], [], 0
    for v, f in parts:
        verts.append(v)
        faces.append(f + off)
        off += v.shape[0]
    return np.concatenate(verts), np.concatenate(faces).astype(np.int64)


def _box_faces(lo, hi, n, floor, skip_floor):
    ex, ey, ez = (np.eye(3)[a] * (hi - lo)[a] for a in range(3))
    faces = [
        (lo, ey, ex), (lo + ez, ex, ey),  # bottom, top
        (lo, ex, ez), (lo + ey, ez, ex),  # y- , y+
        (lo, ez, ey), (lo + ex, ey, ez),  # x- , x+
    ]
    out = []
    for k, (o, u, v) in enumerate(faces):
        if k == 0 and skip_floor and floor is not None and abs(lo[2] - floor) < 1e-9:
            continue
        out.append(_grid_quad(o, u, v, n))
    return out


def _uv_sphere(c, r, n):
    th = np.linspace(0, np.pi, n // 2 + 1)
    ph = np.linspace(0, 2 * np.pi, n, endpoint=False)
    T, P = np.meshgrid(th, ph, indexing="ij")
    verts = c + r * np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], -1).reshape(-1, 3)
    tris = []
    rows = n // 2 + 1
    for i in range(rows - 1):
        for j in range(n):
            a = i * n + j
            b = i * n + (j + 1) % n
            tris += [(a, a + n, b), (b, a + n, b + n)]
    return verts, np.array(tris)
