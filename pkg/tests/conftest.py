import numpy as np
import pytest

from hemofed.model import ModelConfig, build_model


@pytest.fixture
def tiny_config():
    """The reference configuration used for gradient checks."""
    return ModelConfig(input_hw=16, slices_S=3, growth_rate_k=4, block_layout=(2, 2), gru_hidden=8)


@pytest.fixture
def small_config():
    return ModelConfig(input_hw=8, slices_S=4, growth_rate_k=4, block_layout=(2, 2), gru_hidden=8)


@pytest.fixture
def tiny_params(tiny_config):
    params = build_model(tiny_config, seed=0)
    rng = np.random.default_rng(99)
    for name, value in params.items():
        if value.ndim == 1:
            params[name] = rng.uniform(-0.1, 0.1, value.shape)
    return params


# one line per acceptance criterion, repeated at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(capsys):
    """Record and print one pass/fail line, then assert the outcome."""

    def record(name: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return record
