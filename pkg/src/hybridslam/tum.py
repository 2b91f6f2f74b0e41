"""TUM RGB-D directory layout: reading, association and writing.

A dataset directory holds ``rgb.txt``, ``depth.txt`` and optionally
``groundtruth.txt`` (whitespace separated, ``#`` comments), the image
files they reference, and optionally ``intrinsics.txt`` with one line
``fx fy cx cy width height depth_scale``. TUM itself ships intrinsics out
of band, so callers may pass them explicitly instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraIntrinsics, Frame, Pose

ASSOC_TOLERANCE = 0.02


class DatasetError(ValueError):
    pass


def _read_list(path: Path, n_fields: int | None = None):
    """``(lineno, fields)`` for every non-comment line."""
    if not path.exists():
        raise DatasetError(f"missing file {path}")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if n_fields is not None and len(parts) != n_fields:
            raise DatasetError(f"{path}:{lineno}: expected {n_fields} fields, got {len(parts)}")
        try:
            float(parts[0])
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: bad timestamp {parts[0]!r}") from None
        rows.append((lineno, parts))
    prev = -np.inf
    for lineno, parts in rows:
        t = float(parts[0])
        if not t > prev:
            raise DatasetError(f"{path}:{lineno}: timestamps must be strictly increasing")
        prev = t
    return rows


def associate(query: np.ndarray, stamps: np.ndarray, tol: float = ASSOC_TOLERANCE) -> np.ndarray:
    """Index of the nearest stamp for each query time, -1 if none within ``tol``."""
    if stamps.size == 0:
        return np.full(query.shape, -1)
    pos = np.searchsorted(stamps, query)
    lo = np.clip(pos - 1, 0, stamps.size - 1)
    hi = np.clip(pos, 0, stamps.size - 1)
    pick = np.where(np.abs(stamps[hi] - query) < np.abs(stamps[lo] - query), hi, lo)
    return np.where(np.abs(stamps[pick] - query) <= tol + 1e-12, pick, -1)


def read_trajectory(path: str | Path) -> tuple[np.ndarray, list[Pose]]:
    path = Path(path)
    stamps, poses = [], []
    for lineno, parts in _read_list(path, 8):
        try:
            t, pose = Pose.from_tum(" ".join(parts))
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from None
        stamps.append(t)
        poses.append(pose)
    return np.array(stamps), poses


def write_trajectory(path: str | Path, stamps, poses) -> None:
    with open(path, "w") as fh:
        for t, p in zip(stamps, poses):
            fh.write(p.to_tum(float(t)) + "\n")


def read_intrinsics(path: Path) -> CameraIntrinsics:
    vals = path.read_text().split()
    if len(vals) != 7:
        raise DatasetError(f"{path}: expected 'fx fy cx cy width height depth_scale'")
    fx, fy, cx, cy, w, h, s = (float(v) for v in vals)
    return CameraIntrinsics(fx, fy, cx, cy, int(w), int(h), s)


@dataclass
class SequenceSource:
    root: Path
    intrinsics: CameraIntrinsics
    stamps: np.ndarray
    rgb_files: list
    depth_files: list
    gt_poses: list

    def __len__(self) -> int:
        return len(self.stamps)

    def frame(self, i: int) -> Frame:
        K = self.intrinsics
        rgb = np.asarray(Image.open(self.root / self.rgb_files[i]).convert("RGB"), dtype=np.float64) / 255.0
        raw = np.asarray(Image.open(self.root / self.depth_files[i]), dtype=np.float64)
        if rgb.shape[:2] != (K.height, K.width) or raw.shape != (K.height, K.width):
            raise DatasetError(f"frame {i}: image size does not match the intrinsics")
        depth = raw / K.depth_scale
        depth[~np.isfinite(depth)] = 0.0
        return Frame(i, float(self.stamps[i]), rgb, depth, K, self.gt_poses[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self.frame(i)


def load_tum_sequence(root: str | Path, intrinsics: CameraIntrinsics | None = None,
                      max_frames: int | None = None) -> SequenceSource:
    """Associate rgb, depth and ground truth by nearest timestamp (<= 20 ms).

    RGB frames without a depth partner are dropped.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    rgb = _read_list(root / "rgb.txt", 2)
    depth = _read_list(root / "depth.txt", 2)
    if intrinsics is None:
        if not (root / "intrinsics.txt").exists():
            raise DatasetError(f"{root}: no intrinsics.txt and no intrinsics given")
        intrinsics = read_intrinsics(root / "intrinsics.txt")
    r_t = np.array([float(p[0]) for _, p in rgb])
    d_t = np.array([float(p[0]) for _, p in depth])
    d_idx = associate(r_t, d_t)
    gt_t, gt_p = (np.zeros(0), [])
    if (root / "groundtruth.txt").exists():
        gt_t, gt_p = read_trajectory(root / "groundtruth.txt")
    g_idx = associate(r_t, gt_t)
    keep = np.flatnonzero(d_idx >= 0)
    if max_frames is not None:
        keep = keep[:max_frames]
    if keep.size == 0:
        raise DatasetError(f"{root}: no rgb frame has a depth frame within {ASSOC_TOLERANCE * 1000:.0f} ms")
    return SequenceSource(
        root,
        intrinsics,
        r_t[keep],
        [rgb[i][1][1] for i in keep],
        [depth[d_idx[i]][1][1] for i in keep],
        [gt_p[g_idx[i]] if g_idx[i] >= 0 else None for i in keep],
    )


def write_tum_sequence(root: str | Path, frames: list[Frame]) -> None:
    """Write frames as 8-bit RGB and 16-bit depth PNGs plus the index files."""
    root = Path(root)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(exist_ok=True)
    K = frames[0].intrinsics
    rgb_lines, depth_lines, gt_lines = [], [], []
    for f in frames:
        name = f"{f.timestamp:.6f}.png"
        Image.fromarray(np.round(f.rgb * 255.0).astype(np.uint8)).save(root / "rgb" / name)
        raw = np.round(f.depth * K.depth_scale)
        Image.fromarray(np.clip(raw, 0, 65535).astype(np.uint16)).save(root / "depth" / name)
        rgb_lines.append(f"{f.timestamp:.6f} rgb/{name}")
        depth_lines.append(f"{f.timestamp:.6f} depth/{name}")
        if f.gt_pose is not None:
            gt_lines.append(f.gt_pose.to_tum(float(f"{f.timestamp:.6f}")))
    header = "# timestamp filename\n"
    (root / "rgb.txt").write_text(header + "\n".join(rgb_lines) + "\n")
    (root / "depth.txt").write_text(header + "\n".join(depth_lines) + "\n")
    if gt_lines:
        (root / "groundtruth.txt").write_text("# timestamp tx ty tz qx qy qz qw\n" + "\n".join(gt_lines) + "\n")
    (root / "intrinsics.txt").write_text(
        " ".join(repr(float(v)) for v in (K.fx, K.fy, K.cx, K.cy)) + f" {K.width} {K.height} {K.depth_scale!r}\n"
    )
