import pytest

from hybridslam.cli import main

TINY_CONFIG = """\
width = 40
height = 30
fx = 30.0
fy = 30.0
cx = 19.5
cy = 14.5
pixels_track = 200
pixels_map = 300
iters_init = 4
iters_map = 2
iters_track = 2
iters_gba = 2
patch_side = 8
patch_reps = 2
mesh_resolution = 0.1
mesh_samples = 5000
"""


@pytest.fixture(scope="session")
def tiny_cfg_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    p.write_text(TINY_CONFIG)
    return p


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_cfg_path):
    out = tmp_path_factory.mktemp("data") / "box"
    assert main(["synth", str(out), "--config", str(tiny_cfg_path), "--frames", "6"]) == 0
    return out


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory, tiny_cfg_path, tiny_dataset):
    run_dir = tmp_path_factory.mktemp("runs") / "tiny"
    code = main(["run", str(tiny_dataset), "--config", str(tiny_cfg_path), "--run-dir", str(run_dir),
                 "--quiet", "--seed", "3"])
    assert code == 0
    return run_dir
