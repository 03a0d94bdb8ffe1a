import numpy as np
import pytest

from convseg.model import CategoryConfig
from convseg.gradcheck import TINY_MODEL


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_config():
    return CategoryConfig(**TINY_MODEL)


@pytest.fixture
def small_config():
    """Fast but non-trivial network for training-loop tests."""
    return CategoryConfig("lamp", 3, k_neighbors=4, edge_conv_channels=(8, 8),
                          global_channels=16, head_channels=(16,))


_ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict():
    """Record one acceptance line; printed again in the terminal summary."""
    def record(criterion: str, ok: bool, detail: str) -> None:
        line = f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
