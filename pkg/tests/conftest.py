import pytest
import torch

from rectnerf.data import SyntheticLayout, generate_synthetic_scene
from rectnerf.model import ModelConfig, SparseViewNeRF

#: 32x32 images keep the 3-level U-Net happy (8x8 feature maps) and CI fast.
SMALL_LAYOUT = SyntheticLayout(num_views=6, width=32, height=32, focal=32.0, spacing=0.15)


@pytest.fixture(scope="session")
def small_scene():
    return generate_synthetic_scene(0, SMALL_LAYOUT)


@pytest.fixture(scope="session")
def second_scene():
    return generate_synthetic_scene(1, SMALL_LAYOUT)


def tiny_model(dtype=torch.float64, seed=0, **overrides):
    torch.manual_seed(seed)
    return SparseViewNeRF(ModelConfig.tiny(**overrides)).to(dtype)


# --------------------------------------------------------------------------
# acceptance criterion lines

#: ``(criterion, passed, detail)`` in the order the checks ran.
CRITERIA: list = []


def record_criterion(name: str, passed: bool, detail: str) -> bool:
    CRITERIA.append((name, bool(passed), detail))
    print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in CRITERIA:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
