import os

import pytest

SCENARIO_DIR = os.path.join(os.path.dirname(__file__), "..", "scenarios")


@pytest.fixture(scope="session")
def scenario_path() -> str:
    return os.path.abspath(os.path.join(SCENARIO_DIR, "spm.json"))


@pytest.fixture(scope="session")
def scenario_dir() -> str:
    return os.path.abspath(SCENARIO_DIR)
