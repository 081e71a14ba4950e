import numpy as np
import pytest
import torch

from tsuda.datasets import SyntheticSpec, generate_synthetic_scenario

torch.set_num_threads(1)

ACCEPTANCE_LINES: dict = {}


def record_acceptance(number: int, name: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES[number] = f"[{status}] criterion {number:2d} {name}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])


@pytest.fixture(scope="session")
def tiny_scenario():
    spec = SyntheticSpec(num_classes=3, channels=2, length=32, n=90, feature_shift=1.0,
                         noise_std=0.3)
    return generate_synthetic_scenario(spec, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
