import numpy as np
import pytest

from mmreid.config import RunConfig
from mmreid.data import generate

# one line per acceptance criterion, printed in the terminal summary so the
# verdicts are visible even when pytest captures stdout
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_run_config(**overrides):
    """Small fast configuration shared by pipeline-level tests."""
    values = {
        "data.num_identities": 8,
        "data.latent_dim": 4,
        "data.pixel_grid": (2, 2),
        "data.text_tokens": 3,
        "encoder.model_dim": 8,
        "encoder.num_blocks": 1,
        "encoder.num_heads": 2,
        "encoder.patch_grid": (2, 2),
        "encoder.vocab_size": 64,
        "encoder.max_text_len": 6,
        "moe.num_experts": 3,
        "train.epochs": 2,
        "train.batch_identities": 2,
    }
    values.update(overrides)
    return RunConfig(values)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_run_config()


@pytest.fixture(scope="session")
def tiny_splits(tiny_cfg):
    return generate(tiny_cfg.synthetic_config())


@pytest.fixture
def rng():
    return np.random.default_rng(0)
