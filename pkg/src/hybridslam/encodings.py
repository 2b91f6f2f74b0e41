"""Positional encoders: one-blob, multi-resolution hash grid and tri-planes.

Every encoder maps world points ``(n, 3)`` to feature rows and provides
hand-written adjoints into its tables (when it has any) and into the query
points, the latter being what carries pose gradients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .params import ParamStore

log = logging.getLogger(__name__)

# Spatial hash multipliers (Teschner et al.); all odd primes.
HASH_PRIMES = (73856093, 19349663, 83492791)


@dataclass(frozen=True)
class SceneBounds:
    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
        if not np.all(hi > lo):
            raise ValueError(f"bounds max {hi} must exceed min {lo} on every axis")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.max_corner - self.min_corner

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def clamp(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Clamp points into the box.

        Returns the clamped points and a same-shape mask that is 1.0 where a
        coordinate was left untouched (gradient passes) and 0.0 where it was
        clamped.
        """
        xc = np.clip(x, self.min_corner, self.max_corner)
        inside = (x >= self.min_corner) & (x <= self.max_corner)
        if log.isEnabledFor(logging.DEBUG) and not inside.all():
            log.debug("%d coordinates clamped into scene bounds", int((~inside).sum()))
        return xc, inside.astype(np.float64)


class OneBlobEncoder:
    """Per-axis soft binning with a Gaussian kernel.

    Bin ``k`` of an axis receives the kernel mass falling in
    ``[k/bins, (k+1)/bins)`` of the normalized coordinate.
    """

    def __init__(self, bounds: SceneBounds, bins: int = 16, sigma: float | None = None):
        if bins < 1:
            raise ValueError("bins must be >= 1")
        self.bounds = bounds
        self.bins = bins
        self.sigma = 1.0 / bins if sigma is None else float(sigma)
        self.edges = np.arange(bins + 1) / bins

    @property
    def out_dim(self) -> int:
        return 3 * self.bins

    def normalized(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        xc, inside = self.bounds.clamp(x)
        return (xc - self.bounds.min_corner) / self.bounds.extent, inside

    def encode(self, x: np.ndarray, with_grad: bool = False):
        """Encode points.

        Returns:
            ``(features, dfeat)`` with features of shape ``(n, 3*bins)``. When
            ``with_grad`` is set, ``dfeat[i, a, k]`` is the derivative of bin
            ``k`` of axis ``a`` w.r.t. world coordinate ``a``; otherwise None.
        """
        u, inside = self.normalized(np.asarray(x, dtype=np.float64).reshape(-1, 3))
        feat, dfeat = _kernels.oneblob_forward(np.ascontiguousarray(u), self.bins, self.sigma, with_grad)
        if not with_grad:
            return feat, None
        du_dx = inside / self.bounds.extent
        return feat, dfeat * du_dx[..., None]

    def backward_x(self, dfeat: np.ndarray, g_feat: np.ndarray) -> np.ndarray:
        return np.einsum("nak,nak->na", dfeat, g_feat.reshape(dfeat.shape))


@dataclass
class _HashLevel:
    voxel: float
    res: np.ndarray  # vertex count per axis
    dense: bool


class HashGrid:
    """Multi-resolution hash grid with trilinear interpolation.

    Level resolutions grow geometrically from ``base_res`` voxels along the
    longest bound axis to the first resolution whose voxel edge is at most
    ``finest_voxel``. A level whose vertex lattice fits in the table is
    indexed densely, otherwise through the XOR spatial hash.
    """

    def __init__(
        self,
        bounds: SceneBounds,
        store: ParamStore,
        levels: int = 16,
        features: int = 2,
        table_log2: int = 13,
        base_res: int = 16,
        finest_voxel: float = 0.02,
        rng: np.random.Generator | None = None,
        name: str = "hash",
        init_scale: float = 1e-4,
    ):
        self.bounds = bounds
        self.levels = levels
        self.features = features
        self.table_size = 1 << table_log2
        self.name = name
        longest = float(bounds.extent.max())
        finest_res = int(np.ceil(longest / finest_voxel - 1e-9))
        finest_res = max(finest_res, base_res)
        growth = (finest_res / base_res) ** (1.0 / max(levels - 1, 1))
        self.levels_info: list[_HashLevel] = []
        for lv in range(levels):
            n = int(np.floor(base_res * growth**lv + 1e-9))
            if lv == levels - 1:
                n = finest_res
            voxel = longest / n
            res = np.ceil(bounds.extent / voxel - 1e-9).astype(np.int64) + 1
            dense = int(np.prod(res)) <= self.table_size
            self.levels_info.append(_HashLevel(voxel, res, dense))
        rng = rng if rng is not None else np.random.default_rng(0)
        init = rng.uniform(-init_scale, init_scale, size=(levels, self.table_size, features))
        store.add(f"{name}.tables", init, "geometry")
        self.store = store

    @property
    def out_dim(self) -> int:
        return self.levels * self.features

    @property
    def finest_voxel(self) -> float:
        return self.levels_info[-1].voxel

    def tables(self) -> np.ndarray:
        return self.store.value(f"{self.name}.tables")

    def vertex_index(self, level: int, ijk: np.ndarray) -> np.ndarray:
        info = self.levels_info[level]
        ijk = ijk.astype(np.int64)
        if info.dense:
            r = info.res
            return ijk[..., 0] + r[0] * (ijk[..., 1] + r[1] * ijk[..., 2])
        h = ijk.astype(np.uint64) * np.array(HASH_PRIMES, dtype=np.uint64)
        h = h[..., 0] ^ h[..., 1] ^ h[..., 2]
        return (h & np.uint64(self.table_size - 1)).astype(np.int64)

    def cell(self, level: int, xc: np.ndarray):
        """Lower corner vertex and fractional offset of clamped points at a level."""
        info = self.levels_info[level]
        u = (xc - self.bounds.min_corner) / info.voxel
        i0 = np.clip(np.floor(u), 0, info.res - 2).astype(np.int64)
        return i0, u - i0

    def _arrays(self):
        voxels = np.array([info.voxel for info in self.levels_info])
        res = np.stack([info.res for info in self.levels_info]).astype(np.int64)
        dense = np.array([info.dense for info in self.levels_info])
        return voxels, res, dense

    def encode(self, x: np.ndarray, with_x_grad: bool = False):
        """Trilinearly interpolated features, ``(n, levels*features)``, plus a cache."""
        xc, inside = self.bounds.clamp(np.asarray(x, dtype=np.float64))
        voxels, res, dense = self._arrays()
        out = _kernels.hash_forward(xc, self.bounds.min_corner, voxels, res, dense, self.tables())
        return out, {"x": xc, "inside": inside}

    def backward(self, cache, g_out: np.ndarray, param_grad: bool = True, x_grad: bool = False):
        """Accumulate table gradients and optionally return d loss / d x."""
        voxels, res, dense = self._arrays()
        gtab = self.store.grad(f"{self.name}.tables") if param_grad else np.zeros((0, 0, 0))
        gx = _kernels.hash_backward(
            cache["x"], self.bounds.min_corner, voxels, res, dense, self.tables(),
            np.ascontiguousarray(g_out), gtab, param_grad, x_grad,
        )
        return gx * cache["inside"] if x_grad else None


class TriPlaneSet:
    """Coarse and fine feature tri-planes for one kind of feature.

    Each level holds three planes (xy, xz, yz) stacked row-wise in a single
    table of shape ``(rows, channels)``; a point's level feature is the sum
    of its three bilinear plane lookups, and levels are concatenated.
    """

    PLANES = ((0, 1), (0, 2), (1, 2))
    PLANE_NAMES = ("xy", "xz", "yz")

    def __init__(
        self,
        bounds: SceneBounds,
        store: ParamStore,
        name: str,
        group: str,
        cell_sizes: tuple[float, ...] = (0.24, 0.06),
        channels: int = 32,
        rng: np.random.Generator | None = None,
        init_std: float = 0.01,
    ):
        self.bounds = bounds
        self.store = store
        self.name = name
        self.channels = channels
        self.cell_sizes = tuple(float(c) for c in cell_sizes)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.res = []  # vertex counts per axis, per level
        self.offsets = []  # row offset of each plane, per level
        for k, cell in enumerate(self.cell_sizes):
            res = np.ceil(bounds.extent / cell - 1e-9).astype(np.int64) + 1
            sizes = [int(res[a] * res[b]) for a, b in self.PLANES]
            self.res.append(res)
            self.offsets.append(np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64))
            init = rng.normal(0.0, init_std, size=(sum(sizes), channels))
            store.add(self.param_name(k), init, group)

    def param_name(self, level: int) -> str:
        return f"{self.name}.level{level}"

    @property
    def out_dim(self) -> int:
        return self.channels * len(self.cell_sizes)

    def plane_view(self, level: int, plane: int) -> np.ndarray:
        """The ``(res_a, res_b... )`` plane as a ``(res_b, res_a, C)`` view (row index b)."""
        a, b = self.PLANES[plane]
        res = self.res[level]
        start = self.offsets[level][plane]
        stop = start + res[a] * res[b]
        return self.store.value(self.param_name(level))[start:stop].reshape(res[b], res[a], self.channels)

    def encode(self, x: np.ndarray, with_x_grad: bool = False):
        xc, inside = self.bounds.clamp(np.asarray(x, dtype=np.float64))
        C = self.channels
        out = np.empty((xc.shape[0], self.out_dim))
        for k, cell in enumerate(self.cell_sizes):
            out[:, k * C : (k + 1) * C] = _kernels.triplane_forward(
                xc, self.bounds.min_corner, cell, self.res[k], self.offsets[k],
                self.store.value(self.param_name(k)),
            )
        return out, {"x": xc, "inside": inside}

    def backward(self, cache, g_out: np.ndarray, param_grad: bool = True, x_grad: bool = False):
        C = self.channels
        gx = np.zeros((g_out.shape[0], 3)) if x_grad else None
        for k, cell in enumerate(self.cell_sizes):
            g = np.ascontiguousarray(g_out[:, k * C : (k + 1) * C])
            gtable = self.store.grad(self.param_name(k)) if param_grad else np.zeros((0, C))
            part = _kernels.triplane_backward(
                cache["x"], self.bounds.min_corner, cell, self.res[k], self.offsets[k],
                self.store.value(self.param_name(k)), g, gtable, param_grad, x_grad,
            )
            if x_grad:
                gx += part
        if x_grad:
            gx *= cache["inside"]
        return gx
