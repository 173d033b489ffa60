import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from mculab.data import make_moons, split_forget_retain  # noqa: E402
from mculab.experiment.config import fixture_path, load_config  # noqa: E402
from mculab.nn import Arch  # noqa: E402
from mculab.training import TrainSchedule, fit  # noqa: E402

# filled by test_acceptance.py, printed once at the end of the session
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])


@pytest.fixture(scope="session")
def small_ds():
    """200 two-moons points with a 5% forget set and a 20% test split."""
    return split_forget_retain(make_moons(200, 0.1, seed=3), 0.05, 0.2, seed=3)


@pytest.fixture(scope="session")
def small_arch():
    return Arch((2, 16, 2), "tanh")


@pytest.fixture(scope="session")
def small_base(small_ds, small_arch):
    params, _ = fit(small_arch, small_ds.features, small_ds.labels, small_ds.train_idx,
                    TrainSchedule(30, 32, "adam", 0.01, 0.0), seed=3)
    return params


@pytest.fixture(scope="session")
def minimal_cfg():
    return load_config(fixture_path("minimal.cfg"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_setup():
    """(cfg, ds, arch, base params) for the packaged default experiment."""
    from mculab.experiment.pipeline import train_base

    cfg = load_config(None)
    ds = cfg.data.build()
    arch = cfg.model.arch(ds)
    base, _ = train_base(arch, ds, cfg.base.schedule(), cfg.base.seed)
    return cfg, ds, arch, base
