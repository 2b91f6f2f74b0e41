"""Gradient checks and oracle-equivalence checks behind ``hybridslam selftest``.

Each check returns a :class:`CheckResult`; the runner prints one line per
check. ``break_adjoint(op)`` deliberately corrupts one backward pass so the
suite can be shown to catch it (a negative control used by the tests and by
the ``HYBRIDSLAM_BREAK_ADJOINT`` environment variable).
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass

import numpy as np

from . import losses, reference, renderer
from .camera import CameraIntrinsics, Frame, Pose, generate_rays, so3_exp
from .config import Config
from .decoders import MlpDecoder
from .encodings import HashGrid, OneBlobEncoder, SceneBounds, TriPlaneSet
from .field import SceneField
from .objective import draw_samples, evaluate
from .params import ParamStore

GRAD_TOL = 1e-4
ORACLE_TOL = 1e-10
# Gradients below this magnitude are compared absolutely, above it relatively.
GRAD_FLOOR = 1e-5


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{status}  {self.name:<28s} max_err={self.max_error:.3e}  tol={self.tolerance:.0e}{extra}"


def rel_error(analytic, numeric, floor: float = GRAD_FLOOR) -> np.ndarray:
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def central_fd(f, x: np.ndarray, idx, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x.flat[idx]`` (mutated in place)."""
    flat = x.reshape(-1)
    out = np.empty(len(idx))
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[k] = (fp - fm) / (2.0 * h)
    return out


# ---- negative-control hook ---------------------------------------------------------


def _scaled_returns(fn, factor=1.5):
    def wrapped(*args, **kwargs):
        out = fn(*args, **kwargs)
        if isinstance(out, tuple):
            return tuple(factor * o if isinstance(o, np.ndarray) else o for o in out)
        return factor * out if isinstance(out, np.ndarray) else out
    return wrapped


def _scaled_upstream(fn, arg_index, factor=1.5):
    def wrapped(*args, **kwargs):
        args = list(args)
        args[arg_index] = factor * np.asarray(args[arg_index])
        return fn(*args, **kwargs)
    return wrapped


def _ssim_broken(fn):
    def wrapped(*args, **kwargs):
        value, grad = fn(*args, **kwargs)
        return value, 1.5 * grad
    return wrapped


# op name -> (owner, attribute, wrapper)
ADJOINTS = {
    "composite": (renderer, "composite_backward", _scaled_returns),
    "density": (renderer, "density_derivatives", _scaled_returns),
    "ssim": (losses, "ssim_strided", _ssim_broken),
    "hash": (HashGrid, "backward", lambda fn: _scaled_upstream(fn, 2)),
    "triplane": (TriPlaneSet, "backward", lambda fn: _scaled_upstream(fn, 2)),
    "oneblob": (OneBlobEncoder, "backward_x", _scaled_returns),
    "decoder": (MlpDecoder, "backward", lambda fn: _scaled_upstream(fn, 2)),
    "pose": (renderer.PoseSet, "backward", lambda fn: _scaled_upstream(fn, 2)),
}


@contextlib.contextmanager
def break_adjoint(op: str | None):
    """Temporarily corrupt the backward pass of ``op`` (None: no-op)."""
    if not op:
        yield
        return
    if op not in ADJOINTS:
        raise KeyError(f"unknown adjoint {op!r}; choose from {sorted(ADJOINTS)}")
    owner, attr, wrap = ADJOINTS[op]
    original = owner.__dict__[attr]
    setattr(owner, attr, wrap(original))
    try:
        yield
    finally:
        setattr(owner, attr, original)


# ---- per-op gradient checks -------------------------------------------------------


def check_composite(rng) -> CheckResult:
    n, N = 4, 12
    sigma = rng.uniform(0.0, 1.5, (n, N))
    colors = rng.random((n, N, 3))
    z = np.sort(rng.uniform(0.2, 3.0, (n, N)), axis=1)
    a, b = rng.normal(size=(n, 3)), rng.normal(size=n)

    def f():
        _, c, d = renderer.composite(sigma, colors, z)
        return float(np.sum(a * c) + np.sum(b * d))

    gs, gc = renderer.composite_backward(sigma, colors, z, a, b)
    errs = [rel_error(gs.reshape(-1), central_fd(f, sigma, range(sigma.size))),
            rel_error(gc.reshape(-1), central_fd(f, colors, range(colors.size)))]
    return CheckResult("grad composite", float(max(e.max() for e in errs)), GRAD_TOL)


def check_density(rng) -> CheckResult:
    sdf = rng.normal(0.0, 0.3, 50)
    beta = np.array([7.0])
    ds, db = renderer.density_derivatives(sdf, beta[0])
    err = 0.0
    for i in range(sdf.size):
        fd_s = central_fd(lambda: float(renderer.sdf_to_density(sdf[i], beta[0])), sdf, [i])[0]
        fd_b = central_fd(lambda: float(renderer.sdf_to_density(sdf[i], beta[0])), beta, [0])[0]
        err = max(err, rel_error(ds[i], fd_s), rel_error(db[i], fd_b))
    return CheckResult("grad density", float(err), GRAD_TOL)


def check_ssim(rng) -> CheckResult:
    x, y = rng.random((7, 7, 3)), rng.random((7, 7, 3))
    c1, c2 = 0.01**2, 0.03**2
    _, g = losses.ssim_strided(x, y, c1, c2)
    fd = central_fd(lambda: losses.ssim_strided(x, y, c1, c2)[0], x, range(x.size))
    return CheckResult("grad ssim patch", float(rel_error(g.reshape(-1), fd).max()), GRAD_TOL)


def check_losses(rng) -> CheckResult:
    n, N, T = 6, 10, 0.1
    color, gt_color = rng.random((n, 3)), rng.random((n, 3))
    depth, gt_depth = rng.uniform(0.5, 2, n), rng.uniform(0.5, 2, n)
    valid = rng.random(n) > 0.2
    valid[0] = True
    z = np.sort(gt_depth[:, None] + rng.uniform(-0.5, 0.2, (n, N)), axis=1)
    mask = rng.random((n, N)) > 0.1
    sdf = rng.normal(0.0, 0.5, (n, N))

    def fcd():
        lc, ld, *_ = losses.color_depth_loss(color, depth, gt_color, gt_depth, valid)
        return lc + 0.7 * ld

    _, _, g_c, g_d, _ = losses.color_depth_loss(color, depth, gt_color, gt_depth, valid)
    errs = [rel_error(g_c.reshape(-1), central_fd(fcd, color, range(color.size))),
            rel_error(0.7 * g_d, central_fd(fcd, depth, range(n)))]
    wts = (1.0, 0.3, 2.0)

    def fsdf():
        return float(np.dot(wts, losses.sdf_losses(z, sdf, gt_depth, valid, mask, T)[:3]))

    g = losses.sdf_losses(z, sdf, gt_depth, valid, mask, T)[3]
    g_sdf = wts[0] * g["l_sdfm"] + wts[1] * g["l_sdft"] + wts[2] * g["l_fs"]
    errs.append(rel_error(g_sdf.reshape(-1), central_fd(fsdf, sdf, range(sdf.size))))
    return CheckResult("grad mse+sdf losses", float(max(e.max() for e in errs)), GRAD_TOL)


def _small_bounds():
    return SceneBounds(np.array([-0.5, -0.4, 0.0]), np.array([0.5, 0.4, 0.6]))


def _encoder_check(name, enc, store, rng, n=6) -> CheckResult:
    b = enc.bounds
    x = b.min_corner + rng.random((n, 3)) * b.extent
    out, _ = enc.encode(x)
    wv = rng.normal(size=out.shape)
    f = lambda: float(np.sum(wv * enc.encode(x)[0]))  # noqa: E731
    store.zero_grads()
    _, cache = enc.encode(x, with_x_grad=True)
    gx = enc.backward(cache, wv, param_grad=True, x_grad=True)
    touched = np.flatnonzero(store.grads)
    pick = rng.choice(touched, min(60, touched.size), replace=False)
    e_p = rel_error(store.grads[pick], central_fd(f, store.values, pick))
    e_x = rel_error(gx.reshape(-1), central_fd(f, x, range(x.size)))
    return CheckResult(f"grad {name}", float(max(e_p.max(), e_x.max())), GRAD_TOL)


def check_hash(rng) -> CheckResult:
    store = ParamStore()
    grid = HashGrid(_small_bounds(), store, levels=4, features=2, table_log2=8, base_res=4,
                    finest_voxel=0.05, rng=rng, init_scale=0.5)
    return _encoder_check("hash", grid, store, rng)


def check_triplane(rng) -> CheckResult:
    store = ParamStore()
    tp = TriPlaneSet(_small_bounds(), store, "tp", "geometry", (0.3, 0.1), 4, rng, init_std=0.5)
    return _encoder_check("triplane", tp, store, rng)


def check_oneblob(rng) -> CheckResult:
    ob = OneBlobEncoder(_small_bounds(), 8)
    x = ob.bounds.min_corner + rng.random((6, 3)) * ob.bounds.extent
    wv = rng.normal(size=(6, ob.out_dim))
    _, dfeat = ob.encode(x, with_grad=True)
    gx = ob.backward_x(dfeat, wv)
    fd = central_fd(lambda: float(np.sum(wv * ob.encode(x)[0])), x, range(x.size))
    return CheckResult("grad oneblob", float(rel_error(gx.reshape(-1), fd).max()), GRAD_TOL)


def check_decoder(rng) -> CheckResult:
    store = ParamStore()
    errs = []
    for out in ("identity", "sigmoid"):
        dec = MlpDecoder(store, f"dec_{out}", 5, 3, 8, 2, out, rng)
        x = rng.normal(size=(7, 5))
        wv = rng.normal(size=(7, 3))
        f = lambda: float(np.sum(wv * dec.forward(x)[0]))  # noqa: E731
        store.zero_grads()
        gx = dec.backward(dec.forward(x)[1], wv)
        idx = np.flatnonzero(store.grads)
        errs.append(rel_error(store.grads[idx], central_fd(f, store.values, idx)).max())
        errs.append(rel_error(gx.reshape(-1), central_fd(f, x, range(x.size))).max())
    return CheckResult("grad decoder", float(max(errs)), GRAD_TOL)


# ---- full objective -----------------------------------------------------------------


def gradient_problem(seed: int = 0, n_rays: int = 8, encoder: str = "hybrid"):
    """A random scene, one posed frame and a fixed sample draw.

    Returns ``(scene, poses, f)`` where ``f(backward)`` evaluates the
    complete weighted objective and optionally accumulates gradients.
    """
    rng = np.random.default_rng(seed)
    cfg = Config()
    cfg.encoding.encoder = encoder
    cfg.render.n_strat, cfg.render.n_surf = 12, 4
    cfg.loss.patch_side, cfg.loss.patch_reps = 3, 1
    # Light smoothness and a large region keep that term visible in the check.
    cfg.loss.w_smooth = 1e-2
    scene = SceneField(cfg, seed=seed)
    K = CameraIntrinsics(40.0, 40.0, 15.5, 11.5, 32, 24)
    frame = Frame(0, 0.0, rng.random((24, 32, 3)), rng.uniform(0.8, 2.5, (24, 32)), K)
    base = Pose.from_rt(so3_exp(np.array([0.4, -0.6, 0.9])), np.array([0.2, -0.1, 1.1]))
    batch = generate_rays(frame, rng.choice(24 * 32, n_rays, replace=False))
    poses = renderer.PoseSet([0], [base])
    poses.store.values[:] = rng.normal(0.0, 0.05, 6)
    samples = draw_samples(batch, cfg, scene, rng)

    def f(backward: bool = False) -> float:
        parts, _ = evaluate(scene, poses, batch, samples, cfg, backward=backward)
        return parts.total

    return scene, poses, f


def parameter_groups(scene: SceneField) -> dict[str, np.ndarray]:
    """Flat store indices of each checked parameter family."""
    st = scene.store
    groups = {}

    def span(name):
        return np.arange(*st.slot(name))

    if scene.hashgrid is not None:
        groups["hash tables"] = span("hash.tables")
    for planes in (scene.geo_planes, scene.app_planes):
        if planes is None:
            continue
        for p, pname in enumerate(planes.PLANE_NAMES):
            rows = []
            for lv in range(len(planes.cell_sizes)):
                o, _ = st.slot(planes.param_name(lv))
                a, b = planes.PLANES[p]
                start = o + planes.offsets[lv][p] * planes.channels
                rows.append(np.arange(start, start + planes.res[lv][a] * planes.res[lv][b] * planes.channels))
            groups[f"{planes.name}.{pname}"] = np.concatenate(rows)
    for dec in (scene.geo_decoder, scene.color_decoder):
        groups[dec.name] = np.concatenate([span(f"{dec.name}.{k}{i}") for i in range(dec.n_layers) for k in "wb"])
    groups["beta"] = span("log_beta")
    return groups


def _fd_error(f, x, idx, analytic, h):
    """Per-entry relative error against central differences at ``h`` and ``h / 10``.

    A ReLU or bin boundary inside one stencil spoils that difference only;
    the smaller error of the two step sizes is kept.
    """
    e1 = rel_error(analytic, central_fd(f, x, idx, h))
    e2 = rel_error(analytic, central_fd(f, x, idx, h / 10))
    return np.minimum(e1, e2)


def full_gradient_check(seed: int = 0, n_rays: int = 8, per_group: int = 50, h: float = 1e-5,
                        encoder: str = "hybrid") -> list[CheckResult]:
    """FD check of the complete objective, ``per_group`` touched parameters per family."""
    scene, poses, f = gradient_problem(seed, n_rays, encoder)
    rng = np.random.default_rng(seed + 1)
    st = scene.store
    st.zero_grads()
    poses.store.zero_grads()
    f(True)
    g_scene, g_pose = st.grads.copy(), poses.store.grads.copy()
    results = []
    tag = f"full loss {n_rays}r"
    for name, idx in parameter_groups(scene).items():
        touched = idx[g_scene[idx] != 0.0]
        if touched.size == 0:
            results.append(CheckResult(f"{tag} / {name}", float("inf"), GRAD_TOL, "no gradient reached it"))
            continue
        pick = rng.choice(touched, min(per_group, touched.size), replace=False)
        err = _fd_error(lambda: f(False), st.values, pick, g_scene[pick], h)
        results.append(CheckResult(f"{tag} / {name}", float(err.max()), GRAD_TOL, f"{pick.size} params"))
    err = _fd_error(lambda: f(False), poses.store.values, range(6), g_pose, h)
    results.append(CheckResult(f"{tag} / pose", float(err.max()), GRAD_TOL, "6 params"))
    return results


# ---- oracle equivalence ----------------------------------------------------------------


def oracle_composite(rng, n: int) -> CheckResult:
    err = 0.0
    for _ in range(n):
        N = int(rng.integers(1, 24))
        sigma = rng.exponential(0.5, N) * (rng.random(N) > 0.2)
        colors, z = rng.random((N, 3)), np.sort(rng.uniform(0.1, 4.0, N))
        w, c, d = renderer.composite(sigma[None], colors[None], z[None])
        rw, rc, rd = reference.composite_loop(sigma, colors, z)
        err = max(err, np.abs(w[0] - rw).max(), np.abs(c[0] - rc).max(), abs(d[0] - rd))
    return CheckResult("oracle composite", float(err), ORACLE_TOL, f"{n} instances")


def oracle_ssim(rng, n: int) -> CheckResult:
    err = 0.0
    c1, c2 = 0.01**2, 0.03**2
    for _ in range(n):
        side = int(rng.integers(3, 12))
        m = int(rng.integers(side * side, side * side + 10))
        color, gt = rng.random((m, 3)), rng.random((m, 3))
        if rng.random() < 0.3:
            gt = np.clip(color + rng.normal(0, 0.05, color.shape), 0, 1)
        reps = int(rng.integers(1, 3))
        idx = np.stack([rng.choice(m, side * side, replace=False) for _ in range(reps)])
        val, _ = losses.patch_loss(color, gt, idx, side, c1, c2)
        err = max(err, abs(val - reference.patch_loss_reference(color, gt, idx, side, c1, c2)))
    return CheckResult("oracle ssim patch loss", float(err), ORACLE_TOL, f"{n} instances")


def oracle_sdf(rng, n: int) -> CheckResult:
    err = 0.0
    for _ in range(n):
        r, N, T = int(rng.integers(1, 6)), int(rng.integers(1, 16)), float(rng.uniform(0.02, 0.2))
        D = rng.uniform(0.3, 3.0, r)
        valid = rng.random(r) > 0.2
        z = np.sort(D[:, None] + rng.uniform(-4 * T, 2 * T, (r, N)), axis=1)
        mask = rng.random((r, N)) > 0.15
        sdf = rng.normal(0, 0.6, (r, N))
        got = losses.sdf_losses(z, sdf, D, valid, mask, T)[:3]
        ref = reference.sdf_losses_loop(z, sdf, D, valid, mask, T)
        err = max(err, max(abs(a - b) for a, b in zip(got, ref)))
    return CheckResult("oracle sdf losses", float(err), ORACLE_TOL, f"{n} instances")


def oracle_mse(rng, n: int) -> CheckResult:
    err = 0.0
    for _ in range(n):
        m = int(rng.integers(1, 30))
        color, gt = rng.random((m, 3)), rng.random((m, 3))
        depth, gd = rng.uniform(0, 4, m), rng.uniform(0, 4, m)
        valid = rng.random(m) > 0.3
        lc, ld, *_ = losses.color_depth_loss(color, depth, gt, gd, valid)
        rc, rd = reference.color_depth_loop(color, depth, gt, gd, valid)
        err = max(err, abs(lc - rc), abs(ld - rd))
    return CheckResult("oracle mse losses", float(err), ORACLE_TOL, f"{n} instances")


def oracle_encoders(rng, n: int) -> CheckResult:
    store = ParamStore()
    b = _small_bounds()
    grid = HashGrid(b, store, levels=5, features=2, table_log2=9, base_res=4, finest_voxel=0.03,
                    rng=rng, init_scale=1.0)
    tp = TriPlaneSet(b, store, "tp", "geometry", (0.3, 0.07), 3, rng, init_std=1.0)
    ob = OneBlobEncoder(b, 8)
    x = b.min_corner + rng.random((n, 3)) * b.extent
    h, _ = grid.encode(x)
    t, _ = tp.encode(x)
    o, _ = ob.encode(x)
    u, _ = ob.normalized(x)
    err = 0.0
    for i in range(n):
        err = max(err, np.abs(h[i] - reference.hashgrid_loop(grid, x[i])).max())
        ref_t = np.concatenate([
            reference.triplane_loop([tp.plane_view(lv, p) for p in range(3)], x[i], b.min_corner, cell)
            for lv, cell in enumerate(tp.cell_sizes)
        ])
        err = max(err, np.abs(t[i] - ref_t).max())
        ref_o = np.concatenate([reference.oneblob_loop(u[i, a], ob.bins, ob.sigma) for a in range(3)])
        err = max(err, np.abs(o[i] - ref_o).max())
    return CheckResult("oracle encoders", float(err), ORACLE_TOL, f"{n} points")


def oracle_depth_l1(rng, n: int) -> CheckResult:
    from .evaluation import depth_l1_values

    err = 0.0
    for _ in range(n):
        m = int(rng.integers(1, 40))
        r = rng.uniform(0, 4, m)
        g = rng.uniform(0, 4, m) * (rng.random(m) > 0.3)
        if not (g > 0).any():
            g[0] = 1.0
        err = max(err, abs(depth_l1_values(r, g) - reference.depth_l1_loop(r, g)))
    return CheckResult("oracle depth L1", float(err), ORACLE_TOL, f"{n} instances")


# ---- runner ---------------------------------------------------------------------------------


OP_CHECKS = (check_composite, check_density, check_ssim, check_losses, check_hash, check_triplane,
             check_oneblob, check_decoder)
ORACLE_CHECKS = (oracle_composite, oracle_ssim, oracle_sdf, oracle_mse, oracle_depth_l1)


def run_selftest(seed: int = 0, instances: int = 200, broken: str | None = None, out=print) -> list[CheckResult]:
    """Run every check, printing one line each through ``out``."""
    results = []
    t0 = time.perf_counter()
    with break_adjoint(broken):
        rng = np.random.default_rng(seed)
        for chk in OP_CHECKS:
            results.append(chk(rng))
            out(results[-1].line())
        # Eight rays cannot hold a 3x3 patch, so a nine-ray pass covers the SSIM term.
        for res in full_gradient_check(seed) + full_gradient_check(seed, n_rays=9, per_group=10):
            results.append(res)
            out(res.line())
        for chk in ORACLE_CHECKS:
            results.append(chk(rng, instances))
            out(results[-1].line())
        results.append(oracle_encoders(rng, min(instances, 200)))
        out(results[-1].line())
    failed = [r.name for r in results if not r.passed]
    out(f"selftest: {len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f} s")
    if failed:
        out("failed: " + ", ".join(failed))
    return results
