import numpy as np
import pytest

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one line per acceptance criterion for the terminal summary."""
    def log(label: str, ok: bool | None, detail: str) -> bool | None:
        tag = "    " if ok is None else "PASS" if ok else "FAIL"
        _ACCEPTANCE_LINES.append(f"{tag}  {label}: {detail}" if label else f"{tag}      {detail}")
        return ok
    return log


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
