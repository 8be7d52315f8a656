import numpy as np
import pytest

ACCEPTANCE = []


def record_acceptance(number, name, ok, detail=""):
    ACCEPTANCE.append((number, name, bool(ok), detail))
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number}. {name}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

