import json
import numpy as np
import pytest

from xmcl import kernels


@pytest.fixture(params=["numba", "numpy"])
def kernel_path(request, monkeypatch):
    """Run the test once per kernel path."""
    if request.param == "numba" and not kernels.HAS_NUMBA:
        pytest.skip("numba disabled")
    monkeypatch.setattr(kernels, "HAS_NUMBA", request.param == "numba")
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


TINY = {
    "seed": 3,
    "data": {"n_train": 2, "n_val": 2,
             "scene": {"height": 16, "width": 32, "focal": 20.0, "n_points": 256, "min_correspondences": 16}},
    "model": {
        "image": {"channels": [4, 8], "head": 8, "groups": 2},
        "point": {"n_out": [32, 8], "radii": [[0.5, 1.0], [1.0, 2.0]], "k_max": 8, "mlp": [[8], [8]],
                  "decoder": [[8], [8]], "asfp_radii": [2.4, 1.2], "asfp_mlp": [[4], [4]], "head": 8},
    },
    "loss": {"d_shared": 4},
    "optim": {"epochs": 1, "steps_per_epoch": 3, "batch_n": 16},
    "eval": {"n_sample": 16, "every": 2, "k_clusters": 4},
}


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


_AC_LINES: list[str] = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        props = dict(report.user_properties)
        label = props.get("criterion", report.nodeid.split("::")[-1])
        verdict = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _AC_LINES.append(f"{label:<6} {verdict}  {props.get('detail', '')}".rstrip())


def pytest_terminal_summary(terminalreporter):
    if _AC_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _AC_LINES:
            terminalreporter.write_line(line)
