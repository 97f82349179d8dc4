import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from elast import dgp
from elast.learners import LearnerConfig

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# one verdict line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


# small networks keep unit tests quick; acceptance tests pin their own settings
FAST = LearnerConfig(hidden=(16, 16), lr=0.02, max_epochs=400, patience=30)


@pytest.fixture
def fast_config():
    return FAST


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def gaussian_wedge_spec():
    return dgp.PopulationSpec(dgp.GaussianIndep(0.0, 0.5, 0.25), dgp.LogUniform(1.0, math.e ** 2))


def random_binary(seed, n=200):
    from elast.data import Dataset

    r = np.random.default_rng(seed)
    x = (r.random(n) < r.uniform(0.2, 0.8)).astype(float)
    x[:2] = [0.0, 1.0]
    scale = r.uniform(0.2, 2.0, size=2)
    log_y = r.normal(0.3, 1.0) * x + r.normal(size=n) * np.where(x == 1, scale[1], scale[0])
    return Dataset(np.exp(log_y), x)
