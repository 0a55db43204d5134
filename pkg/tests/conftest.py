import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def report():
    """Record one acceptance line; it is echoed in the terminal summary."""
    def _report(criterion: str, passed: bool, detail: str) -> bool:
        _ACCEPTANCE.append(f"{'PASS' if passed else 'FAIL'}  criterion {criterion}: {detail}")
        print(_ACCEPTANCE[-1])
        return passed
    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: s.split("criterion ")[1]):
            terminalreporter.write_line(line)
