import numpy as np
import pytest

from emoscore.model import ModelConfig, ModelParams


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_cfg():
    return ModelConfig(input_dim=6, model_dim=8, heads=2, blocks=2, max_window=4, hidden=(12, 10), seed=3)


@pytest.fixture(scope="session")
def small_params(small_cfg):
    return ModelParams.init(small_cfg)


@pytest.fixture(scope="session")
def desk_cfg():
    return ModelConfig()


@pytest.fixture(scope="session")
def desk_params(desk_cfg):
    return ModelParams.init(desk_cfg)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict():
    """Record one acceptance line, then fail the test if the criterion failed."""

    def record(number, name, ok, detail):
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        _ACCEPTANCE.append(f"[{status}] criterion {number:>2}: {name} ({detail})")
        print(_ACCEPTANCE[-1])
        if ok is None:
            pytest.skip(detail)
        assert ok, f"criterion {number} ({name}) not met: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
