import numpy as np
import pytest

from nlsmsol.grid import Grid
from nlsmsol.linspec import compute_eigenmode


@pytest.fixture(scope="session")
def spec7():
    return compute_eigenmode(7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def grid_ref():
    return Grid(100.0, 2048)


@pytest.fixture(scope="session")
def scaled_eigs():
    """Independent eigensolves at c = 0.5, 2, 4 (grid width matched to the mode width)."""
    grids = {0.5: Grid(80.0, 2048), 2.0: Grid(50.0, 2048), 4.0: Grid(40.0, 2048)}
    return {c: compute_eigenmode(7, g, tol=1e-8 * max(1.0, c) ** 2, c=c) for c, g in grids.items()}


# one PASS/FAIL line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def acceptance():
    def record(n: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
