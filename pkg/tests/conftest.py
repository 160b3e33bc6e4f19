import numpy as np
import pytest

from odorloc.grid_pde import make_config


@pytest.fixture
def small_cfg():
    """A 20x20 grid over the default domain, short run: cheap enough for property tests."""
    return make_config(grid=(20, 20), total_time=0.2, injection_duration=0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS: list[str] = []


@pytest.fixture
def verdict(capsys):
    """Record a one-line PASS/FAIL verdict; all verdicts are repeated in the run summary."""
    def report(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        _VERDICTS.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
