import json
import subprocess
import sys

import pytest

from mculab.experiment.cli import main
from mculab.experiment.config import fixture_path

MINIMAL = str(fixture_path("minimal.cfg"))


def _run(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


def test_stagewise_commands(workdir, capsys):
    base, ga, gd, mid = (str(workdir / n) for n in ("base.mcu", "ga.mcu", "gd.mcu", "mid.mcu"))
    code, out = _run(capsys, "train-base", "--config", MINIMAL, "--out", base)
    assert code == 0 and json.loads(out.out)["checkpoint"] == base
    for method, path in (("ga", ga), ("gd", gd)):
        code, out = _run(capsys, "unlearn", "--config", MINIMAL, "--base", base, "--method", method, "--out", path)
        assert code == 0 and json.loads(out.out)["method"] == method
    code, out = _run(capsys, "curve", "--config", MINIMAL, "--base", base, "--theta1", ga, "--theta2", gd,
                     "--method", "ga", "--steps", "10", "--out", mid)
    assert code == 0 and json.loads(out.out)["steps"] == 10
    code, out = _run(capsys, "eval", "--config", MINIMAL, "--theta1", ga, "--theta2", gd, "--midpoint", mid,
                     "--retrained", base, "--n-points", "5", "--out", str(workdir / "ev"))
    assert code == 0 and "mcu_holds" in json.loads(out.out)
    assert len((workdir / "ev" / "report.csv").read_text().splitlines()) == 6


def test_run_report_plot(workdir, capsys):
    run = str(workdir / "run")
    code, out = _run(capsys, "run", "--config", MINIMAL, "--setting", "met", "--methods", "ga", "gd",
                     "--seed", "3", "--out", run, "--workers", "1")
    assert code == 0 and set(json.loads(out.out)) == {"linear", "bezier"}
    code, out = _run(capsys, "report", "--run", run, "--verify")
    assert code == 0 and "report.csv" in out.out
    svg = str(workdir / "acc.svg")
    code, _ = _run(capsys, "plot", "--run", run, "--metric", "acc_test", "--out", svg)
    assert code == 0 and open(svg).read().lstrip().startswith("<?xml")


def test_config_error_exits_2(capsys):
    code, out = _run(capsys, "run", "--config", MINIMAL, "--set", "protocol.n_points=1")
    assert code == 2 and "n_points" in out.err
    assert _run(capsys, "run", "--set", "nokey")[0] == 2
    assert _run(capsys, "run", "--config", "/does/not/exist.cfg")[0] == 2
    assert _run(capsys, "eval", "--theta1", "/nope.mcu", "--theta2", "/nope.mcu")[0] == 2


def test_numeric_failure_exits_3(tmp_path, capsys):
    code, out = _run(capsys, "run", "--config", MINIMAL, "--set", "base.accuracy_floor=0.999",
                     "--set", "base.epochs=1", "--out", str(tmp_path))
    assert code == 3 and "base" in out.err


def test_corrupt_checkpoint_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.mcu"
    bad.write_bytes(b"MCU1garbage")
    assert _run(capsys, "unlearn", "--config", MINIMAL, "--base", str(bad), "--method", "ga")[0] == 2


def test_usage_error_and_module_entry():
    with pytest.raises(SystemExit) as info:
        main(["unlearn"])
    assert info.value.code == 2
    proc = subprocess.run([sys.executable, "-m", "mculab", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "train-base" in proc.stdout
