import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None)
settings.load_profile("default")

_ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion(request):
    """Record the verdict line for one acceptance criterion; returns the recorder."""
    def record(title: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _ACCEPTANCE[request.node.nodeid] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE.values():
            terminalreporter.write_line(line)
