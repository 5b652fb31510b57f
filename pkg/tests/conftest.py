import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    rows = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::" not in nodeid:
                continue
            if rep.when == "call" or rep.failed:
                rows.append((nodeid.split("::")[-1], "PASS" if rep.passed else "FAIL", rep.duration))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, secs in sorted(set(rows)):
        terminalreporter.write_line(f"{status} {name} ({secs:.1f}s)")
