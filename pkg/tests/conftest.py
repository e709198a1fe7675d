import os
import re
from pathlib import Path

import pytest

from tempered_dp.data import DATA_DIR_VARS, dataset_available

REPO = Path(__file__).resolve().parents[1]

_acceptance = {}


def pytest_addoption(parser):
    parser.addoption("--run-sweep", action="store_true",
                     help="run the multi-hour activation sweep criterion")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-sweep"):
        return
    skip = pytest.mark.skip(reason="multi-hour sweep; opt in with --run-sweep")
    for item in items:
        if "sweep" in item.keywords:
            item.add_marker(skip)


def data_root():
    for var in DATA_DIR_VARS:
        if os.environ.get(var):
            return Path(os.environ[var])
    local = REPO / "data"
    return local if local.exists() else None


@pytest.fixture(scope="session")
def data_dir():
    return data_root()


def require_dataset(name):
    root = data_root()
    if root is None or not dataset_available(name, root):
        pytest.skip(f"{name} files not found (set {DATA_DIR_VARS[0]})")
    return root


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_c(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    key = (int(m.group(1)), m.group(2))
    if report.when == "call" or report.outcome != "passed":
        detail = dict(report.user_properties).get("detail", "")
        if report.skipped:
            reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else ""
            detail = reason.removeprefix("Skipped: ")
        _acceptance[key] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    label = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}
    for (num, name), (outcome, detail) in sorted(_acceptance.items()):
        line = f"[{label.get(outcome, outcome.upper())}] criterion {num:2d} {name}"
        tr.write_line(line + (f": {detail}" if detail else ""))
