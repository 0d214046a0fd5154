import numpy as np
import pytest

from ppgn.feeder import FEEDER_FORMAT, bundled, feeder_from_dict


def line(y_scalar, phases="abc"):
    """Diagonal 3x3 admittance block in [re, im] form."""
    return [[[y_scalar if (r == c and "abc"[r] in phases) else 0.0, 0.0] for c in range(3)] for r in range(3)]


def tree_doc(edges, n, observed=(), slack=1, loads=None, switches=(), y=10.0):
    """Feeder document with nodes 1..n joined by ``edges`` (id pairs)."""
    return {
        "format": FEEDER_FORMAT,
        "nodes": [{"id": i, "phases": "abc"} for i in range(1, n + 1)],
        "branches": [{"from": a, "to": b, "y": line(y)} for a, b in edges],
        "switches": [{"branch": b, "state": s} for b, s in switches],
        "observed": list(observed),
        "slack": {"node": slack, "voltage": [[1.0, 0.0], [-0.5, -0.8660254037844386], [-0.5, 0.8660254037844386]]},
        "loads": loads or [],
    }


@pytest.fixture(scope="session")
def feeder13():
    return bundled("feeder13")


@pytest.fixture(scope="session")
def feeder36():
    return bundled("feeder36")


@pytest.fixture(scope="session")
def fig3():
    return bundled("fig3")


@pytest.fixture
def path3():
    return feeder_from_dict(tree_doc([(1, 2), (2, 3)], 3, observed=[3]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []  # one summary line per acceptance criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
