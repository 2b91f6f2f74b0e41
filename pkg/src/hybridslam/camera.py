"""Pinhole cameras, rigid poses and ray generation.

Conventions: camera frame is x right, y down, z forward (optical axis);
poses map camera coordinates to world coordinates; pixel ``(u, v)`` refers
to the integer pixel index (no half-pixel offset); depth is planar z-depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 5000.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def pixel_rays(self, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Unit camera-frame directions and the range travelled per unit of planar depth."""
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u, dtype=np.float64)], -1)
        scale = np.linalg.norm(d, axis=-1)
        return d / scale[..., None], scale


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(w, dtype=np.float64)).as_matrix()


def so3_log(R: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(R).as_rotvec()


def right_jacobian(w: np.ndarray) -> np.ndarray:
    """Right Jacobian of SO(3): ``Exp(w + d) ~= Exp(w) Exp(Jr(w) d)``."""
    theta2 = float(np.dot(w, w))
    W = skew(w)
    if theta2 < 1e-10:
        return np.eye(3) - 0.5 * W + W @ W / 6.0
    theta = np.sqrt(theta2)
    a = (1.0 - np.cos(theta)) / theta2
    b = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) - a * W + b * (W @ W)


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform; quaternion stored as ``(qx, qy, qz, qw)``."""

    quat: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("quaternion must be finite and non-zero")
        if abs(n - 1.0) > 1e-9:
            q = q / n
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(Rotation.from_matrix(T[:3, :3]).as_quat(), T[:3, 3].copy())

    @classmethod
    def from_rt(cls, R: np.ndarray, t: np.ndarray) -> "Pose":
        return cls(Rotation.from_matrix(R).as_quat(), np.asarray(t, dtype=np.float64).copy())

    @property
    def rotation(self) -> np.ndarray:
        return Rotation.from_quat(self.quat).as_matrix()

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        R = self.rotation
        return Pose.from_rt(R.T, -R.T @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose.from_matrix(self.matrix() @ other.matrix())

    def transform(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.rotation.T + self.translation

    def to_tum(self, timestamp: float) -> str:
        vals = [timestamp, *self.translation, *self.quat]
        return " ".join(repr(float(v)) for v in vals)

    @classmethod
    def from_tum(cls, line: str) -> tuple[float, "Pose"]:
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"expected 8 fields 'timestamp tx ty tz qx qy qz qw', got {len(parts)}")
        t, tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts)
        return t, cls(np.array([qx, qy, qz, qw]), np.array([tx, ty, tz]))

    def distance(self, other: "Pose") -> tuple[float, float]:
        """Translation distance [m] and rotation angle [rad] to another pose."""
        dt = float(np.linalg.norm(self.translation - other.translation))
        dR = self.rotation.T @ other.rotation
        angle = float(np.arccos(np.clip((np.trace(dR) - 1.0) / 2.0, -1.0, 1.0)))
        return dt, angle


def constant_velocity(prev2: Pose, prev1: Pose) -> Pose:
    """``P_{t-1} (P_{t-2}^-1 P_{t-1})``."""
    return Pose.from_matrix(prev1.matrix() @ (np.linalg.inv(prev2.matrix()) @ prev1.matrix()))


@dataclass
class Frame:
    frame_id: int
    timestamp: float
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters, 0 = invalid
    intrinsics: CameraIntrinsics
    gt_pose: Pose | None = None


@dataclass
class RayBatch:
    frame_ids: np.ndarray  # (n,) source frame ids
    pixels: np.ndarray  # (n, 2) integer (u, v)
    dirs_cam: np.ndarray  # (n, 3) unit camera-frame directions
    range_scale: np.ndarray  # (n,) ray length per unit planar depth
    gt_color: np.ndarray  # (n, 3)
    gt_depth: np.ndarray  # (n,) meters, 0 = invalid
    depth_valid: np.ndarray  # (n,) bool
    origins: np.ndarray | None = None  # (n, 3) world, for a given pose set
    directions: np.ndarray | None = None  # (n, 3) world unit

    def __len__(self) -> int:
        return self.frame_ids.shape[0]

    def subset(self, idx) -> "RayBatch":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return RayBatch(
            self.frame_ids[idx], self.pixels[idx], self.dirs_cam[idx], self.range_scale[idx],
            self.gt_color[idx], self.gt_depth[idx], self.depth_valid[idx],
            pick(self.origins), pick(self.directions),
        )

    @staticmethod
    def concat(batches: list["RayBatch"]) -> "RayBatch":
        cat = lambda name: np.concatenate([getattr(b, name) for b in batches])  # noqa: E731
        world = all(b.origins is not None for b in batches)
        return RayBatch(
            cat("frame_ids"), cat("pixels"), cat("dirs_cam"), cat("range_scale"),
            cat("gt_color"), cat("gt_depth"), cat("depth_valid"),
            cat("origins") if world else None, cat("directions") if world else None,
        )


def generate_rays(
    frame: Frame, pixel_indices: np.ndarray, pose: Pose | None = None, max_depth: float = np.inf
) -> RayBatch:
    """Back-project flat pixel indices of ``frame`` into world rays.

    Rays whose depth is 0 or above ``max_depth`` are kept but flagged invalid.
    """
    K = frame.intrinsics
    idx = np.asarray(pixel_indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= K.width * K.height):
        raise IndexError("pixel index outside the image")
    u, v = idx % K.width, idx // K.width
    dirs, scale = K.pixel_rays(u.astype(np.float64), v.astype(np.float64))
    depth = frame.depth.reshape(-1)[idx].astype(np.float64)
    valid = (depth > 0) & (depth <= max_depth)
    batch = RayBatch(
        np.full(idx.size, frame.frame_id, dtype=np.int64),
        np.stack([u, v], -1),
        dirs,
        scale,
        frame.rgb.reshape(-1, 3)[idx].astype(np.float64),
        np.where(valid, depth, 0.0),
        valid,
    )
    if pose is not None:
        batch.origins = np.broadcast_to(pose.translation, (idx.size, 3)).copy()
        batch.directions = dirs @ pose.rotation.T
    return batch
