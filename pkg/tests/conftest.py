import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from drwkv import envs
from drwkv.model import TokenizedBatch
from drwkv.numeric import make_rng

settings.register_profile("default", deadline=None, max_examples=25, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def suite():
    return envs.default_task_suite()


@pytest.fixture(scope="session")
def small_data(suite):
    """Task 0 with 20 noisy expert episodes."""
    episodes, meta = envs.generate_dataset(suite[0], 20, 0.1, 7)
    return meta, episodes


def random_batch(rng, B=3, K=4, S=5, A=1, horizon=64, pad=True) -> TokenizedBatch:
    mask = np.ones((B, K), dtype=bool)
    if pad and B > 1:
        mask[-1, K // 2:] = False
    batch = TokenizedBatch(rtg=rng.normal(size=(B, K, 1)), states=rng.normal(size=(B, K, S)),
                           actions=rng.uniform(-1, 1, size=(B, K, A)),
                           timesteps=rng.integers(0, horizon - K, size=(B, 1)) + np.arange(K),
                           mask=mask)
    for f in ("rtg", "states", "actions"):
        getattr(batch, f)[~mask] = 0.0
    batch.timesteps[~mask] = 0
    return batch


@pytest.fixture
def rng():
    return make_rng(1234)
