import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from svrecon import tensor as T

settings.register_profile("default", max_examples=30, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def float64_mode():
    """Unit tests run in 64-bit mode; training code switches to float32 explicitly."""
    with T.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def record(request):
    """record(n, passed, detail): one acceptance line, echoed now and in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def _record(n: int, passed: bool, detail: str) -> None:
        line = f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines.setdefault(n, []).append(line)
        print(line)
    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        for line in lines[n]:
            terminalreporter.write_line(line)
