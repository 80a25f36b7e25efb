import dataclasses
import time

import numpy as np
import pytest

from semkd.harness import prepare_data, run_methods, train_teacher
from semkd.scenario import load_scenario, scenario_from_dict

ACCEPTANCE_SEEDS = (0, 1, 2, 3, 4)
_acceptance_lines = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _acceptance_lines


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_cfg():
    return load_scenario("default", seed=0)


@pytest.fixture(scope="session")
def world(default_cfg):
    """Default-scenario data and trained teacher pair for seed 0."""
    data = prepare_data(default_cfg)
    return default_cfg, data, train_teacher(default_cfg, data)


class SeedReports(dict):
    elapsed_s = 0.0


@pytest.fixture(scope="session")
def seed_reports():
    """Full three-method runs of the default scenario over the acceptance seeds, timed."""
    start = time.perf_counter()
    reports = SeedReports((seed, run_methods(load_scenario("default", seed=seed))) for seed in ACCEPTANCE_SEEDS)
    reports.elapsed_s = time.perf_counter() - start
    return reports


def tiny_scenario(seed=0, **overrides):
    """Small, fast scenario used where learning quality is irrelevant."""
    data = {
        "seed": seed,
        "num_devices": 3,
        "teacher": {"n_blocks": 3, "width": 8, "max_epochs": 12, "batch_size": 8, "patience": 3},
        "distill": {"stage_epochs": [1, 2, 2], "batch_size": 8},
        "task": {"n_train": 240, "n_val": 200, "n_test": 100, "classes": 4, "input_dim": 6},
        "planner": {"max_iterations": 30},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return scenario_from_dict(data)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def replace(obj, **kw):
    return dataclasses.replace(obj, **kw)
