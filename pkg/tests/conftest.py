import numpy as np
import pytest

from more_kit import data_path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_paths():
    return {k: str(data_path(f"tiny_{k}.tsv" if k != "matrix" else "tiny_matrix.mtx"))
            for k in ("matrix", "genes", "barcodes", "metadata")}


@pytest.fixture(scope="session")
def synthetic_config():
    return str(data_path("synthetic.toml"))


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion."""
    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
