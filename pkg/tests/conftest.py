import numpy as np
import pytest

from rapi.ingest import SyntheticSpec, generate_synthetic
from rapi.recsys import TrainConfig

# small, fast recommender settings shared by the slower tests
DESK_REC = TrainConfig(dim=32, batch_size=256, max_epochs=100, patience=3)


@pytest.fixture(scope="session")
def planted():
    return generate_synthetic(SyntheticSpec(), seed=0)


@pytest.fixture(scope="session")
def planted_ds(planted):
    return planted.dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criterion -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, detail: str):
        ok, text = ACCEPTANCE.get(number, (True, ""))
        ACCEPTANCE[number] = (ok and bool(passed), f"{text}; {detail}" if text else detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark and report.failed:
        number = mark.args[0]
        _, text = ACCEPTANCE.get(number, (True, ""))
        ACCEPTANCE[number] = (False, text or f"{item.name} failed")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): test backs acceptance criterion n")
