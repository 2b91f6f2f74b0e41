import time

import pytest

from hybridslam.cli import main
from hybridslam.selftest import ADJOINTS, break_adjoint, run_selftest


def test_selftest_passes_within_budget(capsys):
    t0 = time.perf_counter()
    assert main(["selftest", "--seed", "0", "--instances", "200"]) == 0
    assert time.perf_counter() - t0 < 300
    out = capsys.readouterr().out
    assert "FAIL" not in out and "checks passed" in out


@pytest.mark.parametrize("op", sorted(ADJOINTS))
def test_broken_adjoint_is_caught_and_named(op):
    lines = []
    results = run_selftest(seed=0, instances=5, broken=op, out=lines.append)
    failed = [r.name for r in results if not r.passed]
    assert failed, op
    assert any(op in name for name in failed), failed
    assert lines[-1].startswith("failed: ")


def test_break_adjoint_restores_original():
    owner, attr, _ = ADJOINTS["decoder"]
    before = owner.__dict__[attr]
    with break_adjoint("decoder"):
        assert owner.__dict__[attr] is not before
    assert owner.__dict__[attr] is before
    with pytest.raises(KeyError):
        with break_adjoint("nonsense"):
            pass


def test_cli_selftest_exit_code_on_broken_adjoint(capsys):
    assert main(["selftest", "--instances", "5", "--break-adjoint", "composite"]) == 4
    assert "failed:" in capsys.readouterr().out
