import numpy as np
import pytest

from vitdecomp.experiments import default_teacher
from vitdecomp.models.data import DataRecipe, gen_synthetic

CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    CRITERIA[n] = (bool(ok), detail)
    print(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}")


@pytest.fixture(scope="session")
def teacher_data():
    return gen_synthetic(DataRecipe(), 12345)


@pytest.fixture(scope="session")
def teacher():
    return default_teacher()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}")
