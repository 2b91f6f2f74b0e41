import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from hybridslam import reference
from hybridslam.camera import Pose
from hybridslam.evaluation import (
    EvaluationError,
    Mesh,
    align_rigid,
    ate_rmse,
    depth_l1_values,
    extract_mesh,
    marching_cubes_grid,
    mesh_metrics,
    point_metrics,
    read_ply,
    sample_sdf_grid,
    sample_surface,
    write_ply,
)

# Unit square with the third corner pushed 4 cm along +x. The value below is
# the optimum found by a derivative-free search over all rigid motions (see
# test_square_example_matches_brute_force); translation-only alignment gives
# sqrt(3) cm and the best rotation lowers it further.
SQUARE_ATE_CM = 1.582707372457624


def _traj(points):
    return np.arange(len(points)) * 0.1, [Pose.from_rt(np.eye(3), p) for p in points]


def _square():
    gt = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0.0]])
    est = gt.copy()
    est[2, 0] += 0.04
    return gt, est


def _random_rigid(rng):
    return Rotation.random(random_state=rng.integers(1 << 31)).as_matrix(), rng.normal(0, 2, 3)


# ---- ATE ------------------------------------------------------------------------------


def test_ate_identity_is_zero():
    pts = np.random.default_rng(0).normal(size=(10, 3))
    t, p = _traj(pts)
    assert ate_rmse(t, p, t, p) == pytest.approx(0.0, abs=1e-12)


def test_ate_rigid_copy_is_zero():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(30, 3))
    R, s = _random_rigid(rng)
    t, gt = _traj(pts)
    _, est = _traj(pts @ R.T + s)
    assert ate_rmse(t, est, t, gt) < 1e-9


def test_square_example_matches_brute_force():
    gt, est = _square()
    t, pg = _traj(gt)
    _, pe = _traj(est)
    got = ate_rmse(t, pe, t, pg)
    assert got == pytest.approx(SQUARE_ATE_CM, abs=1e-9)

    def f(x):
        r = est @ Rotation.from_rotvec(x[:3]).as_matrix().T + x[3:] - gt
        return np.mean(np.sum(r * r, 1))

    best = minimize(f, np.zeros(6), method="Nelder-Mead",
                    options=dict(xatol=1e-12, fatol=1e-18, maxiter=40000, maxfev=80000))
    assert np.sqrt(best.fun) * 100 == pytest.approx(got, abs=1e-6)
    assert got < np.sqrt(3.0)


def test_ate_invariant_under_random_rigid_transforms():
    rng = np.random.default_rng(2)
    gt_pts = rng.normal(size=(20, 3))
    est_pts = gt_pts + rng.normal(0, 0.01, gt_pts.shape)
    t, gt = _traj(gt_pts)
    base = ate_rmse(t, _traj(est_pts)[1], t, gt)
    for _ in range(100):
        R, s = _random_rigid(rng)
        moved = _traj(est_pts @ R.T + s)[1]
        assert abs(ate_rmse(t, moved, t, gt) - base) < 1e-9
        R, s = _random_rigid(rng)
        assert abs(ate_rmse(t, _traj(est_pts)[1], t, _traj(gt_pts @ R.T + s)[1]) - base) < 1e-9


def test_ate_needs_three_pairs():
    t, p = _traj(np.zeros((2, 3)))
    with pytest.raises(EvaluationError, match="at least 3"):
        ate_rmse(t, p, t, p)
    t3, p3 = _traj(np.eye(3))
    with pytest.raises(EvaluationError):
        ate_rmse(t3 + 1.0, p3, t3, p3)


def test_align_rigid_returns_rotation():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(8, 3))
    R, _ = align_rigid(a, a[:, ::-1])
    assert np.linalg.det(R) == pytest.approx(1.0)


# ---- depth L1 -----------------------------------------------------------------------------


def test_depth_l1_cases():
    gt = np.array([1.0, 2.0, 0.0, 3.0])
    assert depth_l1_values(gt, gt) == 0.0
    assert depth_l1_values(gt + 0.01, gt) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(EvaluationError):
        depth_l1_values(gt, np.zeros(4))
    rng = np.random.default_rng(4)
    for _ in range(100):
        r, g = rng.uniform(0, 3, 50), np.where(rng.random(50) > 0.2, rng.uniform(0, 3, 50), 0.0)
        assert abs(depth_l1_values(r, g) - reference.depth_l1_loop(r, g)) < 1e-12


# ---- meshes -------------------------------------------------------------------------------


def _sphere_fn(r=0.5, c=(0.0, 0.0, 0.0)):
    return lambda p: np.linalg.norm(p - np.asarray(c), axis=1) - r


def test_sphere_radius_within_one_percent():
    m = extract_mesh(_sphere_fn(), [-0.7] * 3, [0.7] * 3, 0.02)
    radii = np.linalg.norm(m.vertices, axis=1)
    assert np.abs(radii - 0.5).max() < 0.005


def test_sphere_mesh_is_watertight():
    m = extract_mesh(_sphere_fn(0.3), [-0.5] * 3, [0.5] * 3, 0.02)
    edges = np.sort(np.concatenate([m.faces[:, [0, 1]], m.faces[:, [1, 2]], m.faces[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    assert np.all(counts == 2)


def _signed_volume(m):
    a, b, c = (m.vertices[m.faces[:, k]] for k in range(3))
    return np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0


def test_negated_sdf_flips_orientation_only():
    grid = sample_sdf_grid(_sphere_fn(0.3), [-0.5] * 3, [0.5] * 3, 0.04)
    a = marching_cubes_grid(grid, [-0.5] * 3, 0.04)
    b = marching_cubes_grid(-grid, [-0.5] * 3, 0.04)
    va = a.vertices[np.lexsort(a.vertices.T)]
    vb = b.vertices[np.lexsort(b.vertices.T)]
    np.testing.assert_allclose(va, vb, atol=1e-9)
    assert np.sign(_signed_volume(a)) == -np.sign(_signed_volume(b))


def test_empty_sdf_gives_empty_mesh():
    m = extract_mesh(lambda p: np.ones(len(p)), [0] * 3, [1] * 3, 0.1)
    assert m.empty
    with pytest.raises(EvaluationError, match="predicted mesh is empty"):
        mesh_metrics(m, m)


def _plane(x0, x1, y0, y1, z, n=20):
    xs, ys = np.linspace(x0, x1, n + 1), np.linspace(y0, y1, n + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    v = np.stack([X.ravel(), Y.ravel(), np.full(X.size, z)], 1)
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    a = (i * (n + 1) + j).ravel()
    faces = np.concatenate([np.stack([a, a + n + 1, a + 1], 1), np.stack([a + 1, a + n + 1, a + n + 2], 1)])
    return Mesh(v, faces)


def test_identical_meshes():
    m = _plane(0, 1, 0, 1, 0)
    mm = mesh_metrics(m, m, samples=20000)
    assert mm.accuracy_cm == 0.0 and mm.completion_cm == 0.0 and mm.completion_rate_pct == 100.0


def test_translated_plane_is_one_centimeter():
    mm = mesh_metrics(_plane(0, 1, 0, 1, 0.01), _plane(0, 1, 0, 1, 0), samples=20000)
    assert mm.accuracy_cm == pytest.approx(1.0, abs=1e-9)
    assert mm.completion_cm == pytest.approx(1.0, abs=1e-9)


def test_half_extent_completion_rate():
    # A 5 cm band past the cut adds 0.25 % on a 20 m strip.
    mm = mesh_metrics(_plane(0, 10, 0, 1, 0), _plane(0, 20, 0, 1, 0), samples=40000)
    assert mm.completion_rate_pct == pytest.approx(50.25, abs=1.0)
    assert mm.accuracy_cm < 2.0  # sample spacing on 20 m^2


def test_accuracy_completion_swap():
    a = sample_surface(_plane(0, 1, 0, 1, 0), 5000, seed=1)
    b = sample_surface(_sphere_mesh(), 5000, seed=2)
    assert point_metrics(a, b).accuracy_cm == point_metrics(b, a).completion_cm


def _sphere_mesh():
    return extract_mesh(_sphere_fn(0.3, (0.5, 0.5, 0.4)), [0] * 3, [1] * 3, 0.05)


def test_surface_samples_are_area_uniform():
    pts = sample_surface(_plane(0, 2, 0, 1, 0, n=3), 40000, seed=0)
    assert np.mean(pts[:, 0] < 1.0) == pytest.approx(0.5, abs=0.01)


def test_ply_round_trip(tmp_path):
    m = _sphere_mesh()
    write_ply(tmp_path / "m.ply", m)
    r = read_ply(tmp_path / "m.ply")
    assert np.array_equal(r.vertices, m.vertices) and np.array_equal(r.faces, m.faces)
    (tmp_path / "bad.ply").write_text("solid\n")
    with pytest.raises(EvaluationError):
        read_ply(tmp_path / "bad.ply")
