import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled in by test_acceptance.py
CRITERIA: dict = {}


def record(number: int, ok, detail: str) -> None:
    # ok=None marks a criterion that could not be run
    CRITERIA.setdefault(number, []).append((ok, detail))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(CRITERIA):
        for ok, detail in CRITERIA[n]:
            status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
            terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
