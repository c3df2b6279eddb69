import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from t1node.relaxometry import PhantomSpec, synthesize_phantom

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def noiseless_phantom():
    return synthesize_phantom(PhantomSpec(dims=(12, 12, 1)), seed=5)


@pytest.fixture(scope="session")
def noisy_phantom():
    return synthesize_phantom(PhantomSpec(dims=(12, 12, 1), noise_sigma=0.02), seed=6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        detail = dict(report.user_properties).get("criterion_detail", "")
        _CRITERIA[name] = ("PASS" if report.outcome == "passed" else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda s: int(s.split("_")[2])):
        status, detail = _CRITERIA[name]
        num = name.split("_")[2]
        label = " ".join(name.split("_")[3:])
        terminalreporter.write_line(f"criterion {num} ({label}): {status}  {detail}".rstrip())
