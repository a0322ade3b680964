from __future__ import annotations

import numpy as np
import pytest

from nmn.dataset import DataSpec, generate_dataset, load_dataset
from nmn.training import TrainConfig, train


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "small"
    generate_dataset(DataSpec(seed=7, n_train=400, n_test=200), root)
    return root


@pytest.fixture(scope="session")
def small_ds(small_data):
    return load_dataset(small_data)


@pytest.fixture(scope="session")
def small_run(small_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "small"
    cfg = TrainConfig.from_dict({"data": str(small_data), "out": str(out), "epochs": 3, "tf.horizon": 2, "seed": 3})
    train(cfg)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """A model trained long enough for module-level behaviour checks."""
    root = tmp_path_factory.mktemp("data") / "mid"
    generate_dataset(DataSpec(seed=11, n_train=2000, n_test=300), root)
    ds = load_dataset(root)
    cfg = TrainConfig.from_dict({"data": str(root), "out": str(root.parent / "run"), "epochs": 12, "tf.horizon": 6, "seed": 0})
    res = train(cfg, ds=ds)
    return ds, res["modules"]


_ACCEPTANCE = {}


@pytest.fixture
def record():
    """Log one acceptance line; printed together at the end of the run."""

    def _record(n, ok, detail):
        _ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
