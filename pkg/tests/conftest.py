import numpy as np
import pytest

from fedmox.data import WorldConfig, generate_world


@pytest.fixture(scope="session")
def small_world():
    return generate_world(WorldConfig(server_size=8, client_size=12, test_per_domain=4, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record a one-line PASS/FAIL verdict; echoed in the terminal summary."""

    def _say(name: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else "")
        print(line)
        _LINES.append(line)
        return ok

    return _say


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance")
        for line in _LINES:
            terminalreporter.write_line(line)
