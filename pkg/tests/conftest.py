import numpy as np
import pytest

from medblip.data import Vocabulary


@pytest.fixture(scope="session")
def vocab():
    return Vocabulary()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    ran = any("test_acceptance" in getattr(r, "nodeid", "")
              for reports in terminalreporter.stats.values() for r in reports)
    if mod is None or not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        ok, detail = mod.RESULTS.get(n, (False, "not run or errored before reporting"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
