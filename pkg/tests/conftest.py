import numpy as np
import pytest
import torch

from chromstraight.synthdata import DataConfig, make_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Four training pairs, three test pairs and a six-image pool."""
    out = tmp_path_factory.mktemp("tiny_data")
    make_dataset(DataConfig(n_train=4, n_test=3, n_pool=6, num_types=3, seed=5), out)
    return out


ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def verdict():
    """Record one acceptance line and fail the test if the check failed."""
    def record(name: str, ok: bool, detail: str = "", blocking: bool = True):
        ACCEPTANCE.append((name, bool(ok), detail + ("" if blocking else " (non-blocking)")))
        if blocking:
            assert ok, f"{name}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
