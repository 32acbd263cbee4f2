import numpy as np
import pytest

from capsrem.capsnet import CapsNetConfig, CapsNetModel
from capsrem.cli import micro_model_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_config():
    return micro_model_config(r=3)


@pytest.fixture
def micro_model(micro_config):
    return CapsNetModel(micro_config, seed=0, dtype=np.float64)


@pytest.fixture
def small_config():
    # 12x12 input, 3x3 primary grid with two capsule types
    return CapsNetConfig(image_height=12, image_width=12, conv1_channels=6, conv1_kernel=3,
                         primary_kernel=3, primary_stride=3, num_types=2, primary_dim=3,
                         class_dim=4, num_classes=3, routing_iterations=3)


def central_difference(f, x, h=1e-5):
    """Gradient of scalar ``f`` at ``x`` by central differences, entry by entry."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b, floor=1e-8):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


# -- acceptance report ------------------------------------------------------------------------

ACCEPTANCE_LINES = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Remember one pass/fail line; all of them are printed at the end of the session."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
