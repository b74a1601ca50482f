import re
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

TITLES = {
    1: "interference ordering",
    2: "at most one preemption",
    3: "sub-layer reclamation latency",
    4: "zero-fault safety",
    5: "greedy handle selection",
    6: "headroom rate control",
    7: "throughput model truths",
    8: "determinism and metric idempotence",
}

_criteria: dict[int, bool] = {}


def pytest_addoption(parser):
    parser.addoption("--update-golden", action="store_true", default=False,
                     help="rewrite CLI golden files instead of comparing against them")


@pytest.fixture
def update_golden(request):
    return request.config.getoption("--update-golden")


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.failed:
        ok = not report.failed and not report.skipped
        _criteria[n] = _criteria.get(n, True) and ok


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        ok = _criteria[n]
        terminalreporter.write_line(f"criterion {n} ({TITLES.get(n, '?')}): "
                                    f"{'PASS' if ok else 'FAIL'}")
