import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from prefill_engine import archetype, build_model  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ARCHETYPES = ("full", "linear_hybrid", "swa_hybrid")


@pytest.fixture(scope="session")
def models():
    """One small model per archetype, sharper attention than the default init."""
    return {name: build_model(archetype(name, seed=11, init_std=0.3)) for name in ARCHETYPES}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.VERDICTS):
        terminalreporter.write_line(mod.VERDICTS[n])
