import numpy as np
import pytest

from hybridslam import reference
from hybridslam.config import Config
from hybridslam.encodings import HashGrid, SceneBounds
from hybridslam.losses import (
    TERMS,
    LossBreakdown,
    NonFiniteLoss,
    color_depth_loss,
    draw_patch_indices,
    loss_weights,
    patch_loss,
    sdf_losses,
    sdf_sets,
    smoothness_loss,
    total_loss,
)
from hybridslam.params import ParamStore
from hybridslam.selftest import check_losses, check_ssim

C1, C2 = 0.01**2, 0.03**2


def _batch(rng, n=64, N=20, T=0.06):
    D = rng.uniform(0.5, 3.0, n)
    valid = rng.random(n) > 0.1
    z = np.sort(np.concatenate([rng.uniform(0.1, 4.0, (n, N // 2)),
                                D[:, None] + rng.uniform(-T, T, (n, N - N // 2))], 1), axis=1)
    mask = rng.random((n, N)) > 0.05
    return z, D, valid, mask


# ---- color / depth ------------------------------------------------------------------


def test_color_depth_trivial_cases():
    c = np.random.default_rng(0).random((5, 3))
    d = np.ones(5)
    lc, ld, *_ = color_depth_loss(c, d, c, d, np.ones(5, bool))
    assert lc == 0.0 and ld == 0.0
    lc, *_ = color_depth_loss(np.zeros((1, 3)), np.zeros(1), np.ones((1, 3)), np.zeros(1), np.ones(1, bool))
    assert lc == 1.0


def test_color_depth_empty_valid_set_flags():
    _, ld, _, gd, flags = color_depth_loss(np.zeros((3, 3)), np.ones(3), np.zeros((3, 3)), np.zeros(3),
                                           np.zeros(3, bool))
    assert ld == 0.0 and np.all(gd == 0.0) and "no_valid_depth" in flags


def test_color_depth_matches_loop_oracle():
    rng = np.random.default_rng(1)
    c, g = rng.random((40, 3)), rng.random((40, 3))
    d, gd = rng.uniform(0, 3, 40), rng.uniform(0, 3, 40)
    valid = rng.random(40) > 0.3
    lc, ld, *_ = color_depth_loss(c, d, g, gd, valid)
    rc, rd = reference.color_depth_loop(c, d, g, gd, valid)
    assert abs(lc - rc) < 1e-12 and abs(ld - rd) < 1e-12


# ---- patch ------------------------------------------------------------------------------


def test_patch_identical_and_constant():
    rng = np.random.default_rng(2)
    c = rng.random((100, 3))
    idx, side, _ = draw_patch_indices(100, 8, 3, rng)
    assert patch_loss(c, c, idx, side, C1, C2)[0] == pytest.approx(0.0, abs=1e-14)
    half = np.full((100, 3), 0.5)
    assert patch_loss(half, half, idx, side, C1, C2)[0] == pytest.approx(0.0, abs=1e-14)


def test_patch_matches_dense_ssim_reference():
    rng = np.random.default_rng(3)
    for _ in range(20):
        c, g = rng.random((300, 3)), rng.random((300, 3))
        idx, side, _ = draw_patch_indices(300, 13, 2, rng)
        val = patch_loss(c, g, idx, side, C1, C2)[0]
        assert abs(val - reference.patch_loss_reference(c, g, idx, side, C1, C2)) < 1e-10


def test_patch_range_and_shrink():
    rng = np.random.default_rng(4)
    for _ in range(50):
        c, g = rng.random((64, 3)), rng.random((64, 3))
        idx, side, _ = draw_patch_indices(64, 8, 2, rng)
        assert 0.0 <= patch_loss(c, g, idx, side, C1, C2)[0] <= 2.0
    # Anti-correlated patches push SSIM below zero, still inside the range.
    x = rng.random((64, 3))
    idx, side, _ = draw_patch_indices(64, 8, 1, rng)
    assert 1.0 < patch_loss(x, 1.0 - x, idx, side, C1, C2)[0] <= 2.0
    idx, side, flags = draw_patch_indices(50, 32, 1, rng)
    assert side == 7 and idx.shape == (1, 49) and "patch_shrunk" in flags
    assert len(set(idx[0])) == 49


def test_patch_permutation_invariance_given_indices():
    rng = np.random.default_rng(5)
    c, g = rng.random((100, 3)), rng.random((100, 3))
    idx, side, _ = draw_patch_indices(100, 9, 2, rng)
    perm = rng.permutation(100)
    inv = np.argsort(perm)
    # Rays permuted and the index sequences remapped select the same pixels.
    a = patch_loss(c, g, idx, side, C1, C2)[0]
    b = patch_loss(c[perm], g[perm], inv[idx], side, C1, C2)[0]
    assert a == b


def test_ssim_and_loss_adjoints():
    rng = np.random.default_rng(6)
    assert check_ssim(rng).passed
    assert check_losses(rng).passed


# ---- smoothness -------------------------------------------------------------------------


def _dense_grid():
    bounds = SceneBounds(np.zeros(3), np.array([2.0, 1.0, 1.0]))
    st = ParamStore()
    g = HashGrid(bounds, st, 2, 2, 12, 4, 0.25, np.random.default_rng(0), init_scale=1.0)
    assert g.levels_info[-1].dense
    return st, g


def test_smoothness_constant_is_zero():
    st, g = _dense_grid()
    g.tables()[...] = 0.37
    assert smoothness_loss(g, np.array([1, 1, 1]), 2) == pytest.approx(0.0, abs=1e-28)


def test_smoothness_linear_slope():
    st, g = _dense_grid()
    g.tables()[...] = 0.0
    lv = len(g.levels_info) - 1
    res = g.levels_info[lv].res
    ijk = np.stack(np.meshgrid(*[np.arange(r) for r in res], indexing="ij"), -1).reshape(-1, 3)
    s = 0.3
    g.tables()[lv, g.vertex_index(lv, ijk)] = s * ijk[:, :1]
    # Two channels, each contributes s^2 from the x step.
    assert smoothness_loss(g, np.array([0, 0, 0]), 2) == pytest.approx(2 * s * s, abs=1e-14)


def test_smoothness_is_quadratic():
    st, g = _dense_grid()
    a = smoothness_loss(g, np.array([1, 0, 1]), 3)
    g.tables()[...] *= 2.0
    assert smoothness_loss(g, np.array([1, 0, 1]), 3) == pytest.approx(4 * a, rel=1e-13)


# ---- SDF ------------------------------------------------------------------------------


def test_perfect_field_has_zero_band_loss():
    rng = np.random.default_rng(7)
    z, D, valid, mask = _batch(rng)
    T = 0.06
    sdf = (D[:, None] - z) / T
    sdf = np.where(np.abs(z - D[:, None]) < T, sdf, 1.0)
    lm, lt, lf, _, _ = sdf_losses(z, sdf, D, valid, mask, T)
    assert lm == pytest.approx(0.0, abs=1e-24) and lt == pytest.approx(0.0, abs=1e-24) and lf == 0.0


def test_free_space_values():
    rng = np.random.default_rng(8)
    z, D, valid, mask = _batch(rng)
    assert sdf_losses(z, np.ones_like(z), D, valid, mask, 0.06)[2] == 0.0
    assert sdf_losses(z, np.zeros_like(z), D, valid, mask, 0.06)[2] == 1.0


def test_free_space_excludes_points_behind_surface():
    rng = np.random.default_rng(9)
    z, D, valid, mask = _batch(rng)
    middle, tail, free = sdf_sets(z, D, valid, mask, 0.06, 0.5)
    assert not np.any(free & (z > D[:, None]))
    assert not np.any(middle & tail) and not np.any(free & (middle | tail))


def test_empty_sets_flag():
    z = np.array([[1.0, 2.0]])
    lm, lt, lf, _, flags = sdf_losses(z, np.zeros_like(z), np.array([5.0]), np.array([True]),
                                      np.ones_like(z, bool), 0.06)
    assert lm == lt == 0.0 and lf == 1.0
    assert "empty_sdf_middle" in flags and "empty_sdf_tail" in flags


def test_sdf_matches_loop_oracle():
    rng = np.random.default_rng(10)
    for _ in range(10):
        z, D, valid, mask = _batch(rng)
        sdf = rng.normal(0, 1, z.shape)
        got = sdf_losses(z, sdf, D, valid, mask, 0.06)[:3]
        ref = reference.sdf_losses_loop(z, sdf, D, valid, mask, 0.06)
        np.testing.assert_allclose(got, ref, atol=1e-12, rtol=0)


# ---- aggregation --------------------------------------------------------------------------


def test_total_loss_weights():
    parts = LossBreakdown(*np.linspace(0.1, 0.7, 7))
    assert total_loss(parts, {t: 0.0 for t in TERMS}) == 0.0
    w = {t: 0.0 for t in TERMS}
    w["l_color"] = 5.0
    assert total_loss(parts, w) == 5.0 * parts.l_color
    cfg = Config()
    w = loss_weights(cfg.loss)
    assert total_loss(parts, w) == sum(w[t] * getattr(parts, t) for t in TERMS)
    cfg.loss.patch_loss = False
    assert loss_weights(cfg.loss)["l_patch"] == 0.0


def test_total_loss_names_nonfinite_term():
    parts = LossBreakdown(l_sdft=float("inf"))
    with pytest.raises(NonFiniteLoss) as e:
        total_loss(parts, {t: 1.0 for t in TERMS})
    assert e.value.term == "l_sdft"


def test_default_weights():
    w = loss_weights(Config().loss)
    assert w == {"l_color": 5.0, "l_depth": 0.1, "l_patch": 1.0, "l_smooth": 1e-6,
                 "l_sdfm": 200.0, "l_sdft": 10.0, "l_fs": 5.0}
