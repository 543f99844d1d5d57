import os

import pytest


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run the end-to-end training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow") or os.environ.get("MOEMIL_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="end-to-end training; pass --run-slow or set MOEMIL_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
