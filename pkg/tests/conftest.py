import time

import pytest

from _helpers import TIMINGS
from safelora import adapt

ACCEPTANCE_SEEDS = (0, 1, 2, 3)


@pytest.fixture(scope="session")
def tracker_checkpoints():
    """Source-trained tracker policies for the four fixed seeds, shared across modules."""
    start = time.perf_counter()
    checkpoints = adapt.pretrain("tracker", ACCEPTANCE_SEEDS, adapt.PRETRAIN_BUDGET)
    TIMINGS["pretrain"] = time.perf_counter() - start
    return checkpoints


def pytest_terminal_summary(terminalreporter):
    from _helpers import ACCEPTANCE_RESULTS

    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
