import numpy as np
import pytest

from aumask.labelstore import DatasetDescriptor, merge


def disjoint_db(value=1):
    """Two datasets, 10 samples each, each annotating one different class."""
    descs = [
        DatasetDescriptor("A", frozenset({"AU01"})),
        DatasetDescriptor("B", frozenset({"AU02"})),
    ]
    tables = {
        "A": [(f"s{i}", f"a/{i}.png", {"AU01": value}) for i in range(10)],
        "B": [(f"s{i}", f"b/{i}.png", {"AU02": value}) for i in range(10)],
    }
    return descs, tables


def ab_tables():
    """A annotates {AU01, AU02}, B annotates {AU02, AU04}; 3 samples each."""
    descs = [
        DatasetDescriptor("A", frozenset({"AU01", "AU02"}), "file://a"),
        DatasetDescriptor("B", frozenset({"AU02", "AU04"}), "file://b"),
    ]
    tables = {
        "A": [
            ("0", "a0.png", {"AU01": 1, "AU02": 0}),
            ("1", "a1.png", {"AU01": 0, "AU02": 1}),
            ("2", "a2.png", {"AU01": 1, "AU02": 1}),
        ],
        "B": [
            ("0", "b0.png", {"AU02": 1, "AU04": 0}),
            ("1", "b1.png", {"AU02": 0, "AU04": 0}),
            ("2", "b2.png", {"AU02": 1, "AU04": 1}),
        ],
    }
    return descs, tables


@pytest.fixture
def disjoint():
    return merge(*disjoint_db())


@pytest.fixture
def ab_db():
    return merge(*ab_tables())


def random_pair(rng, n, k, missingness, binary_pred=False):
    y = (rng.random((n, k)) < 0.5).astype(np.int8)
    y[rng.random((n, k)) < missingness] = -1
    if binary_pred:
        p = (rng.random((n, k)) < 0.5).astype(np.float64)
    else:
        p = rng.random((n, k))
    return p, y


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    """Record a one-line pass/fail verdict for an acceptance criterion."""
    details = {}
    yield details
    failed = getattr(request.node, "rep_call", None)
    status = "FAIL" if failed is None or failed.failed else "PASS"
    extra = ", ".join(f"{k}={v}" for k, v in details.items())
    ACCEPTANCE_LINES.append(f"{status}  {request.node.name}  {extra}")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
