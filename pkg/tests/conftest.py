import numpy as np
import pytest
import torch

from bilateral_vit.datasets import synth_dataset

ACCEPTANCE_RESULTS = []


@pytest.fixture(scope="session")
def synth8():
    return synth_dataset(8, 64, seed=0)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "synthA"
    synth_dataset(8, 64, seed=1, out_dir=out, test_fraction=0.25, dataset_tag="synthA")
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _torch_defaults():
    torch.use_deterministic_algorithms(False)
    yield


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion this test implements")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = dict(report.user_properties).get("criterion")
    if marker is not None:
        ACCEPTANCE_RESULTS.append((marker, report.outcome))


@pytest.hookimpl(tryfirst=True)
def pytest_runtest_makereport(item, call):
    m = item.get_closest_marker("criterion")
    if m is not None and not any(k == "criterion" for k, _ in item.user_properties):
        item.user_properties.append(("criterion", (m.args[0], m.args[1])))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for (number, text), outcome in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0][0]):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {text}")
