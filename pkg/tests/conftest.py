import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def mini_csc_path():
    return FIXTURES / "mini_csc"


@pytest.fixture
def mini_csc(mini_csc_path):
    from perspectivist import load_dataset

    return load_dataset(mini_csc_path)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, (status, detail) in RESULTS.items():
        terminalreporter.write_line(f"{status:<4} {name}" + (f"  [{detail}]" if detail else ""))
