import os

import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long acceptance checks, run with BRAINAGE_RUN_SLOW=true")


def pytest_collection_modifyitems(config, items):
    if os.getenv("BRAINAGE_RUN_SLOW", "false").lower() == "true":
        return
    skip_slow = pytest.mark.skip(reason="set BRAINAGE_RUN_SLOW=true to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
