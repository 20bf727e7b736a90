import time
from dataclasses import replace

import pytest

from robocoord import config, sim


@pytest.fixture(scope="session")
def default_run_config():
    return config.parse_text(config.default_config_text(), "default.ini")


@pytest.fixture(scope="session")
def scenario(default_run_config):
    return default_run_config.scenario


def _timed(cfg):
    start = time.perf_counter()
    result = sim.run(cfg)
    return result, time.perf_counter() - start


@pytest.fixture(scope="session")
def robust_run(scenario):
    """Seed-0 robust run of the shipped scenario and its wall time."""
    return _timed(replace(scenario, mode="robust"))


@pytest.fixture(scope="session")
def deterministic_run(scenario):
    return _timed(replace(scenario, mode="deterministic"))
