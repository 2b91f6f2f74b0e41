import numpy as np
import pytest

from hybridslam import reference
from hybridslam.encodings import HASH_PRIMES, HashGrid, OneBlobEncoder, SceneBounds, TriPlaneSet
from hybridslam.params import ParamStore

BOUNDS = SceneBounds(np.array([-1.0, -0.5, 0.0]), np.array([1.0, 0.5, 1.2]))


def _grid(levels=4, log2=8, base=4, finest=0.1, seed=0):
    st = ParamStore()
    g = HashGrid(BOUNDS, st, levels, 2, log2, base, finest, np.random.default_rng(seed), init_scale=1.0)
    return st, g


# ---- one-blob ----------------------------------------------------------------------


def test_oneblob_bin_center_argmax():
    ob = OneBlobEncoder(BOUNDS, 16)
    for k in (0, 5, 15):
        x = BOUNDS.min_corner + (k + 0.5) / 16 * BOUNDS.extent
        f, _ = ob.encode(x[None])
        assert int(np.argmax(f[0, :16])) == k


def test_oneblob_mirror_symmetry():
    ob = OneBlobEncoder(BOUNDS, 16)
    rng = np.random.default_rng(1)
    u = rng.random((20, 3))
    a = ob.encode(BOUNDS.min_corner + u * BOUNDS.extent)[0].reshape(20, 3, 16)
    b = ob.encode(BOUNDS.min_corner + (1 - u) * BOUNDS.extent)[0].reshape(20, 3, 16)
    np.testing.assert_allclose(a, b[:, :, ::-1], atol=1e-14)


def test_oneblob_axis_mass_matches_kernel_integral():
    # Total mass per axis is the Gaussian mass inside [0, 1]; numerically
    # integrate the kernel as an independent oracle.
    from scipy.integrate import quad

    ob = OneBlobEncoder(BOUNDS, 16)
    s = ob.sigma
    for u in (0.5, 0.3, 0.02, 0.97):
        x = BOUNDS.min_corner + u * BOUNDS.extent
        f = ob.encode(x[None])[0].reshape(3, 16)
        mass, _ = quad(lambda t: np.exp(-0.5 * ((t - u) / s) ** 2) / (s * np.sqrt(2 * np.pi)), 0, 1)
        np.testing.assert_allclose(f.sum(axis=1), mass, atol=1e-10)
    # Away from the boundary the mass is constant (1 to within 1e-6).
    mid = ob.encode(BOUNDS.min_corner + np.array([0.4, 0.5, 0.6]) * BOUNDS.extent)[0]
    np.testing.assert_allclose(mid.reshape(3, 16).sum(1), 1.0, atol=1e-6)


def test_oneblob_matches_loop_oracle():
    ob = OneBlobEncoder(BOUNDS, 16)
    rng = np.random.default_rng(2)
    x = BOUNDS.min_corner + rng.random((50, 3)) * BOUNDS.extent
    f = ob.encode(x)[0]
    u, _ = ob.normalized(x)
    for i in range(50):
        ref = np.concatenate([reference.oneblob_loop(u[i, a], 16, ob.sigma) for a in range(3)])
        np.testing.assert_allclose(f[i], ref, atol=1e-14)
    assert np.all(f > 0)


# ---- hash grid ---------------------------------------------------------------------


def test_hash_levels_span_base_to_finest():
    _, g = _grid(levels=6, log2=12, base=8, finest=0.05)
    assert g.levels_info[0].voxel == pytest.approx(2.0 / 8)
    assert g.levels_info[-1].voxel <= 0.05 + 1e-12
    voxels = [lv.voxel for lv in g.levels_info]
    assert all(a > b for a, b in zip(voxels, voxels[1:]))
    assert g.levels_info[0].dense and not g.levels_info[-1].dense


def test_hash_index_constants():
    _, g = _grid(levels=6, log2=8, base=4, finest=0.05)
    lv = len(g.levels_info) - 1
    ijk = np.array([[3, 7, 11]])
    expected = ((3 * HASH_PRIMES[0]) ^ (7 * HASH_PRIMES[1]) ^ (11 * HASH_PRIMES[2])) % 256
    assert g.vertex_index(lv, ijk)[0] == expected


def test_hash_vertex_and_center():
    st, g = _grid()
    tables = g.tables()
    info = g.levels_info[1]
    ijk = np.array([2, 1, 3])
    x = BOUNDS.min_corner + ijk * info.voxel
    out = g.encode(x[None])[0][0]
    np.testing.assert_allclose(out[2:4], tables[1, g.vertex_index(1, ijk[None])[0]], atol=1e-14)
    center = x + 0.5 * info.voxel
    corners = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)]) + ijk
    mean = tables[1, g.vertex_index(1, corners)].mean(axis=0)
    np.testing.assert_allclose(g.encode(center[None])[0][0, 2:4], mean, atol=1e-14)


def test_hash_matches_loop_oracle():
    st, g = _grid(levels=5, log2=7, base=3, finest=0.08)
    rng = np.random.default_rng(4)
    x = BOUNDS.min_corner + rng.random((100, 3)) * BOUNDS.extent
    out = g.encode(x)[0]
    for i in range(100):
        np.testing.assert_allclose(out[i], reference.hashgrid_loop(g, x[i]), atol=1e-13)


def test_hash_adjoint_is_trilinear_weight():
    st, g = _grid()
    info = g.levels_info[2]
    x = BOUNDS.min_corner + np.array([3.25, 1.5, 2.75]) * info.voxel
    st.zero_grads()
    _, cache = g.encode(x[None])
    go = np.zeros((1, g.out_dim))
    go[0, 4] = 1.0  # level 2, feature 0
    g.backward(cache, go)
    gt = st.grad("hash.tables")
    idx = g.vertex_index(2, np.array([[3, 1, 2]]))[0]
    assert gt[2, idx, 0] == pytest.approx(0.75 * 0.5 * 0.25, abs=1e-14)


def test_hash_locality():
    st, g = _grid()
    rng = np.random.default_rng(5)
    x = BOUNDS.min_corner + rng.random((400, 3)) * BOUNDS.extent
    before = g.encode(x)[0]
    lv, entry = 3, 17
    g.tables()[lv, entry, 0] += 1.0
    after = g.encode(x)[0]
    changed = np.any(after != before, axis=1)
    i0, _ = g.cell(lv, x)
    stencil = np.zeros(400, dtype=bool)
    for d in np.ndindex(2, 2, 2):
        stencil |= g.vertex_index(lv, i0 + np.array(d)) == entry
    assert np.array_equal(changed, stencil)
    # Only that level's columns move.
    assert np.array_equal(np.flatnonzero(np.any(after != before, axis=0)), [2 * lv])


def test_hash_trilinear_within_cell():
    st, g = _grid()
    rng = np.random.default_rng(6)
    info = g.levels_info[2]
    corner = np.array([4, 2, 3])
    f = rng.random((20, 3))
    x = BOUNDS.min_corner + (corner + f) * info.voxel
    tab = g.tables()
    vals = {d: tab[2, g.vertex_index(2, (corner + np.array(d))[None])[0]] for d in np.ndindex(2, 2, 2)}
    closed = sum(
        ((f[:, 0] if d[0] else 1 - f[:, 0]) * (f[:, 1] if d[1] else 1 - f[:, 1]) * (f[:, 2] if d[2] else 1 - f[:, 2]))[:, None]
        * v for d, v in vals.items()
    )
    np.testing.assert_allclose(g.encode(x)[0][:, 4:6], closed, atol=1e-13)


def test_out_of_bounds_points_are_clamped():
    st, g = _grid()
    inside = g.encode(BOUNDS.max_corner[None])[0]
    outside, cache = g.encode((BOUNDS.max_corner + 0.3)[None], with_x_grad=True)
    np.testing.assert_array_equal(inside, outside)
    gx = g.backward(cache, np.ones((1, g.out_dim)), param_grad=False, x_grad=True)
    assert np.all(gx == 0.0)


# ---- tri-planes ---------------------------------------------------------------------


def _planes(channels=4, std=1.0, seed=0):
    st = ParamStore()
    tp = TriPlaneSet(BOUNDS, st, "tp", "geometry", (0.24, 0.06), channels, np.random.default_rng(seed), std)
    return st, tp


def test_triplane_zero_and_constant():
    st, tp = _planes(channels=32)
    st.values[:] = 0.0
    x = BOUNDS.min_corner + np.random.default_rng(0).random((5, 3)) * BOUNDS.extent
    assert np.all(tp.encode(x)[0] == 0.0)
    assert tp.out_dim == 64
    tp.plane_view(0, 0)[...] = 0.7
    out = tp.encode(x)[0]
    np.testing.assert_allclose(out[:, :32], 0.7, atol=1e-14)
    assert np.all(out[:, 32:] == 0.0)


def test_triplane_matches_bilinear_oracle():
    st, tp = _planes()
    rng = np.random.default_rng(7)
    x = BOUNDS.min_corner + rng.random((100, 3)) * BOUNDS.extent
    out = tp.encode(x)[0]
    for i in range(100):
        ref = np.concatenate([
            reference.triplane_loop([tp.plane_view(lv, p) for p in range(3)], x[i], BOUNDS.min_corner, c)
            for lv, c in enumerate(tp.cell_sizes)
        ])
        np.testing.assert_allclose(out[i], ref, atol=1e-13)


def test_triplane_bilinear_within_cell():
    st, tp = _planes()
    cell = tp.cell_sizes[1]
    rng = np.random.default_rng(8)
    # Move along z only inside one cell: the xy plane term is constant and
    # the xz / yz terms are linear, so the output is linear in z.
    base = BOUNDS.min_corner + (np.array([3, 2, 5]) + 0.4) * cell
    t = np.sort(rng.random(6)) * 0.5
    x = base + np.outer(t * cell, [0, 0, 1])
    y = tp.encode(x)[0][:, 4:]
    slope = (y[-1] - y[0]) / (t[-1] - t[0])
    np.testing.assert_allclose(y, y[0] + np.outer(t - t[0], slope), atol=1e-12)
