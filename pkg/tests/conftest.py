import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mhc_gnn.graphs import make_sbm
from mhc_gnn.linalg import Rng

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def small_graph():
    """12-node two-block graph with 4 random features and block labels."""
    g = make_sbm([6, 6], 0.6, 0.2, Rng(1))
    return g.with_features(Rng(3).normal((12, 4)))


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" or "test_acceptance.py::test_criterion_" not in rep.nodeid:
                continue
            num = rep.nodeid.split("test_criterion_")[1].split("_")[0]
            detail = dict(rep.user_properties).get("detail", "")
            if not detail and rep.failed:
                detail = str(rep.longrepr.reprcrash.message).splitlines()[0]
            lines.append((int(num), f"criterion {num}: {outcome[:4].upper()}  {detail}"))
    if lines:
        terminalreporter.section("acceptance")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
