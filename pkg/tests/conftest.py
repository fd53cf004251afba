import os

import numpy as np
import pytest

from mecch.graph import load_graph

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")
G1_DIR = os.path.join(FIXTURES, "g1")


@pytest.fixture
def g1():
    return load_graph(os.path.join(G1_DIR, "nodes.tsv"), os.path.join(G1_DIR, "edges.tsv"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (status, title, detail, seconds); filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        status, title, detail, secs = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num} {status}: {title} ({secs:.1f} s) {detail}".rstrip())
