"""The hybrid scene field: encoders feeding the geometry and color decoders."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import Config
from .decoders import MlpDecoder, decode_color, decode_geometry
from .encodings import HashGrid, OneBlobEncoder, SceneBounds, TriPlaneSet
from .params import ParamStore


@dataclass
class FieldEval:
    sdf: np.ndarray  # (n,)
    rgb: np.ndarray  # (n, 3)
    cache: dict


class SceneField:
    """All trainable scene parameters plus the query / adjoint plumbing.

    ``encoder`` selects the feature encoders: ``hybrid`` uses hash grid,
    tri-planes and one-blob; ``hash`` and ``triplane`` drop the other
    parametric encoding (one-blob is kept in every mode).
    """

    def __init__(self, cfg: Config, seed: int = 0):
        enc = cfg.encoding
        self.mode = enc.encoder
        self.bounds = SceneBounds(np.array(enc.bounds_min), np.array(enc.bounds_max))
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        self.oneblob = OneBlobEncoder(self.bounds, enc.oneblob_bins)
        self.hashgrid = None
        self.geo_planes = self.app_planes = None
        if self.mode in ("hybrid", "hash"):
            self.hashgrid = HashGrid(
                self.bounds, self.store, enc.hash_levels, enc.hash_features, enc.hash_table_log2,
                enc.hash_base_res, enc.hash_finest_voxel, rng,
            )
        if self.mode in ("hybrid", "triplane"):
            self.geo_planes = TriPlaneSet(
                self.bounds, self.store, "geo_planes", "geometry",
                (enc.geo_coarse_cell, enc.geo_fine_cell), enc.triplane_channels, rng,
            )
            self.app_planes = TriPlaneSet(
                self.bounds, self.store, "app_planes", "appearance",
                (enc.app_coarse_cell, enc.app_fine_cell), enc.triplane_channels, rng,
            )
        self.store.add("log_beta", np.array([np.log(cfg.render.beta_init)]), "geometry")
        self.g_dim = enc.g_dim
        self.hash_dim = self.hashgrid.out_dim if self.hashgrid else 0
        self.geo_tri_dim = self.geo_planes.out_dim if self.geo_planes else 0
        self.app_tri_dim = self.app_planes.out_dim if self.app_planes else 0
        ob = self.oneblob.out_dim
        self.geo_decoder = MlpDecoder(
            self.store, "geo_decoder", self.hash_dim + self.geo_tri_dim + ob, 1 + enc.g_dim,
            enc.hidden_dim, 2, "identity", rng,
        )
        self.color_decoder = MlpDecoder(
            self.store, "color_decoder", self.app_tri_dim + ob + enc.g_dim, 3,
            enc.hidden_dim, 2, "sigmoid", rng,
        )

    @property
    def beta(self) -> float:
        return float(np.exp(self.store.value("log_beta")[0]))

    def query(self, pts: np.ndarray, with_x_grad: bool = False, color: bool = True) -> FieldEval:
        ob, dob = self.oneblob.encode(pts, with_grad=with_x_grad)
        cache = {"dob": dob, "ob": ob, "pts": pts, "x_grad": with_x_grad}
        h = tg = None
        if self.hashgrid is not None:
            h, cache["hash"] = self.hashgrid.encode(pts, with_x_grad)
        if self.geo_planes is not None:
            tg, cache["geo"] = self.geo_planes.encode(pts, with_x_grad)
        geo, cache["geo_dec"] = decode_geometry(self.geo_decoder, h, tg, ob)
        cache["g"] = geo.g
        fe = FieldEval(geo.sdf, None, cache)
        if color:
            self.add_color(fe)
        return fe

    def add_color(self, fe: FieldEval, select: np.ndarray | None = None) -> None:
        """Evaluate color for all points, or only for the ``select`` indices (others get 0)."""
        c = fe.cache
        sel = np.arange(fe.sdf.shape[0]) if select is None else np.asarray(select)
        pts = c["pts"][sel]
        ta = None
        if self.app_planes is not None:
            ta, c["app"] = self.app_planes.encode(pts, c["x_grad"])
        rgb, c["col_dec"] = decode_color(self.color_decoder, ta, c["ob"][sel], c["g"][sel])
        c["col_sel"] = sel
        if select is None:
            fe.rgb = rgb
        else:
            fe.rgb = np.zeros((fe.sdf.shape[0], 3))
            fe.rgb[sel] = rgb

    def sdf(self, pts: np.ndarray, chunk: int = 65536) -> np.ndarray:
        out = np.empty(pts.shape[0])
        for s in range(0, pts.shape[0], chunk):
            out[s : s + chunk] = self.query(pts[s : s + chunk], color=False).sdf
        return out

    def backward(self, cache: dict, g_sdf: np.ndarray, g_rgb: np.ndarray,
                 param_grad: bool = True, x_grad: bool = False):
        """Accumulate parameter gradients; return ``d loss / d pts`` if ``x_grad``."""
        n = g_sdf.shape[0]
        A, OB = self.app_tri_dim, self.oneblob.out_dim
        g_geo_out = np.zeros((n, 1 + self.g_dim))
        g_geo_out[:, 0] = g_sdf
        g_ob = np.zeros((n, OB))
        gx = np.zeros((n, 3)) if x_grad else None
        if "col_dec" in cache:
            sel = cache["col_sel"]
            g_col_in = self.color_decoder.backward(cache["col_dec"], g_rgb[sel], param_grad, True)
            g_ob[sel] = g_col_in[:, A : A + OB]
            g_geo_out[sel, 1:] = g_col_in[:, A + OB :]
            if self.app_planes is not None:
                part = self.app_planes.backward(cache["app"], g_col_in[:, :A], param_grad=param_grad, x_grad=x_grad)
                if x_grad:
                    gx[sel] += part
        g_geo_in = self.geo_decoder.backward(cache["geo_dec"], g_geo_out, param_grad, True)
        H, G = self.hash_dim, self.geo_tri_dim
        g_ob += g_geo_in[:, H + G :]
        for enc, key, g in ((self.hashgrid, "hash", g_geo_in[:, :H]), (self.geo_planes, "geo", g_geo_in[:, H : H + G])):
            if enc is None:
                continue
            part = enc.backward(cache[key], g, param_grad=param_grad, x_grad=x_grad)
            if x_grad:
                gx += part
        if x_grad:
            gx += self.oneblob.backward_x(cache["dob"], g_ob)
        return gx
