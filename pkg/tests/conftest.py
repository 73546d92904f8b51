import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sastack import parse_program

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def fig_source() -> str:
    return (DATA / "flag_check.s").read_text()


@pytest.fixture(scope="session")
def fig_expected() -> str:
    return (DATA / "flag_check.qs_block.s").read_text()


@pytest.fixture()
def fig_program(fig_source):
    return parse_program(fig_source)
