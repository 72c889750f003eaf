import re
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "data"

_criteria = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def data_dir():
    return DATA


@pytest.fixture
def record(request):
    """``record(ok, detail)`` files the result for the test's ``criterion`` marker.

    A test that raises before recording is filed as a failure.
    """
    cid = str(request.node.get_closest_marker("criterion").args[0])
    seen = []

    def _record(ok, detail=""):
        seen.append(ok)
        _criteria[cid] = (bool(ok), detail)

    yield _record
    if not seen:
        _criteria[cid] = (False, "raised before reporting a result")


def _natural(cid):
    m = re.match(r"(\d+)(.*)", cid)
    return (int(m.group(1)), m.group(2))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_criteria, key=_natural):
        ok, detail = _criteria[cid]
        terminalreporter.write_line(f"CRITERION {cid}: {'PASS' if ok else 'FAIL'}  {detail}")
