import numpy as np
import pytest

from mesaha.phantom import NoduleSpec, PhantomSpec, generate_phantom


@pytest.fixture(scope="session")
def small_phantom():
    """One phantom with a single 10 mm nodule, shared across tests."""
    spec = PhantomSpec(
        dims=(112, 112, 30),
        nodules=(NoduleSpec(center_mm=(56.0, 56.0, 15.3), semi_axes_mm=(5.0, 4.5, 4.0)),),
        seed=7,
    )
    volume, masks, records = generate_phantom(spec)
    return spec, volume, masks[0], records[0]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance summary ------------------------------------------------------------

_criteria = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_c" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        props = dict(report.user_properties)
        _criteria.append((props.get("criterion", report.nodeid), report.outcome, props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, detail in _criteria:
        status = {"passed": "PASS", "skipped": "SKIP"}.get(outcome, "FAIL")
        terminalreporter.write_line(f"{status}  {name}  {detail}".rstrip())
