import numpy as np
import pytest
from PIL import Image

from hybridslam.camera import CameraIntrinsics, Frame, Pose
from hybridslam.config import Config, ConfigError, parse_config, parse_config_text
from hybridslam.synthetic import (
    SyntheticScene,
    look_at,
    make_sequence,
    orbit_poses,
    render_synthetic_frame,
)
from hybridslam.tum import (
    DatasetError,
    associate,
    load_tum_sequence,
    read_trajectory,
    write_trajectory,
    write_tum_sequence,
)

K = CameraIntrinsics(60.0, 60.0, 19.5, 14.5, 40, 30, 5000.0)


# ---- config ---------------------------------------------------------------------------


def test_empty_config_is_defaults(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# nothing\n\n")
    assert parse_config(p).to_text() == Config().to_text()
    assert parse_config(None).pipeline.t_l == 0.09


def test_config_values_and_echo_round_trip():
    cfg = parse_config_text("t_l = 0.09\nencoder = hash\nbounds_min = -1,-1,0\ngba = false\n")
    assert cfg.pipeline.t_l == 0.09 and cfg.encoding.encoder == "hash" and cfg.pipeline.gba is False
    assert parse_config_text(cfg.to_text()).to_text() == cfg.to_text()


@pytest.mark.parametrize("text,msg", [
    ("pixels_map = -1", "positive integer required"),
    ("pixels_map = 2.5", "pixels_map: expected positive integer"),
    ("t_l = abc", "t_l: expected positive number"),
    ("bogus = 1", "unknown config key"),
    ("encoder = sparse", "expected one of"),
    ("no equals sign", "expected 'key = value'"),
])
def test_config_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config_text(text)


# ---- TUM layout -------------------------------------------------------------------------


def test_association_nearest_within_tolerance():
    idx = associate(np.array([1.000]), np.array([0.990, 1.030]))
    assert idx[0] == 0
    assert associate(np.array([1.0]), np.array([1.025]))[0] == -1


def test_pose_text_round_trip(tmp_path):
    line = "1305031102.175304 1.3405 0.6266 1.6575 0.6574 0.6126 -0.2949 -0.3248"
    t, p = Pose.from_tum(line)
    (tmp_path / "gt.txt").write_text("# comment\n" + p.to_tum(t) + "\n")
    ts, ps = read_trajectory(tmp_path / "gt.txt")
    write_trajectory(tmp_path / "again.txt", ts, ps)
    assert (tmp_path / "again.txt").read_text() == p.to_tum(t) + "\n"


def _write_dataset(root, depth_raw=5000):
    (root / "rgb").mkdir(parents=True)
    (root / "depth").mkdir()
    Image.fromarray(np.full((30, 40, 3), 128, np.uint8)).save(root / "rgb" / "a.png")
    Image.fromarray(np.full((30, 40), depth_raw, np.uint16)).save(root / "depth" / "a.png")
    Image.fromarray(np.zeros((30, 40), np.uint16)).save(root / "depth" / "b.png")
    (root / "rgb.txt").write_text("# rgb\n1.000 rgb/a.png\n")
    (root / "depth.txt").write_text("0.990 depth/a.png\n1.030 depth/b.png\n")
    (root / "intrinsics.txt").write_text("60 60 19.5 14.5 40 30 5000\n")


def test_load_scales_depth_and_associates(tmp_path):
    _write_dataset(tmp_path)
    seq = load_tum_sequence(tmp_path)
    f = seq.frame(0)
    assert seq.depth_files == ["depth/a.png"]
    assert np.all(f.depth == 1.0)
    np.testing.assert_allclose(f.rgb, 128 / 255.0)
    assert f.gt_pose is None


def test_loader_errors_name_the_line(tmp_path):
    _write_dataset(tmp_path)
    (tmp_path / "depth.txt").write_text("0.990 depth/a.png\nxx depth/b.png\n")
    with pytest.raises(DatasetError, match="depth.txt:2"):
        load_tum_sequence(tmp_path)
    (tmp_path / "depth.txt").write_text("1.0 depth/a.png\n0.5 depth/b.png\n")
    with pytest.raises(DatasetError, match="strictly increasing"):
        load_tum_sequence(tmp_path)
    (tmp_path / "rgb.txt").unlink()
    with pytest.raises(DatasetError, match="missing file"):
        load_tum_sequence(tmp_path)
    with pytest.raises(DatasetError, match="does not exist"):
        load_tum_sequence(tmp_path / "nope")


def test_synthetic_round_trip_through_tum_layout(tmp_path):
    cfg = Config()
    cfg.synth.width, cfg.synth.height, cfg.synth.fx, cfg.synth.fy = 40, 30, 30.0, 30.0
    cfg.synth.cx, cfg.synth.cy = 19.5, 14.5
    frames = make_sequence(cfg, n_frames=3)
    write_tum_sequence(tmp_path, frames)
    seq = load_tum_sequence(tmp_path)
    assert len(seq) == 3
    for a, b in zip(frames, seq):
        np.testing.assert_array_equal(a.rgb, b.rgb)
        np.testing.assert_array_equal(a.depth, b.depth)
        assert a.gt_pose.distance(b.gt_pose)[0] < 1e-6
        assert np.all(np.isfinite(b.rgb))


# ---- synthetic scene ----------------------------------------------------------------------


def test_wall_depth_two_meters():
    scene = SyntheticScene(obstacles=[])
    pose = look_at(np.array([0.0, 0.0, 1.0]), np.array([2.0, 0.0, 1.0]))
    _, depth = render_synthetic_frame(scene, pose, K)
    # Center of a 40 x 30 image falls between pixels; use the four nearest.
    assert np.all(np.abs(depth[14:16, 19:21] - 2.0) < 1e-4)


def test_escaping_rays_have_zero_depth():
    scene = SyntheticScene(room_min=None, room_max=None)
    pose = look_at(np.array([0.0, -3.0, 3.0]), np.array([0.0, 0.0, 3.0]))
    rgb, depth = render_synthetic_frame(scene, pose, K)
    assert np.all(depth == 0.0) and np.all(rgb == 0.0)


def test_render_is_deterministic():
    pose = orbit_poses(5)[2]
    a = render_synthetic_frame(SyntheticScene(), pose, K)
    b = render_synthetic_frame(SyntheticScene(), pose, K)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_back_projection_lands_on_surface():
    scene = SyntheticScene()
    for pose in orbit_poses(50)[::12]:
        rgb, depth = render_synthetic_frame(scene, pose, K)
        v, u = np.nonzero(depth > 0)
        dirs, scale = K.pixel_rays(u.astype(float), v.astype(float))
        pts = pose.translation + (depth[v, u] * scale)[:, None] * (dirs @ pose.rotation.T)
        assert np.mean(np.abs(scene.sdf(pts)) < 1e-3) >= 0.999
        assert not np.any(np.isnan(rgb))


def test_sdf_is_lipschitz_and_orbit_in_free_space():
    scene = SyntheticScene()
    rng = np.random.default_rng(0)
    a = rng.uniform([-2, -1.5, 0], [2, 1.5, 2.5], (20000, 3))
    b = a + rng.normal(0, 1e-3, a.shape)
    ratio = np.abs(scene.sdf(a) - scene.sdf(b)) / np.linalg.norm(a - b, axis=1)
    assert ratio.max() <= 1 + 1e-3
    eyes = np.array([p.translation for p in orbit_poses(50)])
    assert np.all(scene.sdf(eyes) > 0.1)


def test_frame_stores_gt_pose():
    frames = make_sequence(Config(), n_frames=2)
    assert isinstance(frames[0], Frame) and frames[1].gt_pose is not None
    assert frames[0].rgb.shape == (120, 160, 3)
