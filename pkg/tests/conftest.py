import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def plant():
    from shwmpc.plant import SyntheticPlant

    return SyntheticPlant()


@pytest.fixture(scope="session")
def teacher(plant):
    return plant.model


@pytest.fixture(scope="session")
def fold_model():
    """Dense model fitted to the scalar plant with a fold in its input map."""
    from shwmpc.baseline import baseline_fit, fold_dataset

    model, report = baseline_fit(fold_dataset(), hidden=16, epochs=200)
    return model, report


def pytest_configure(config):
    config.acceptance_results = []


@pytest.fixture
def verdict(request, capsys):
    """Record and print one pass/fail line for an acceptance criterion, then assert it."""

    def record(number: int, title: str, passed: bool, detail: str):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {title} -- {detail}"
        request.config.acceptance_results.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_results", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
