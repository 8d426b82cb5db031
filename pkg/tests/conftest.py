import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running experiment")


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """A 12-trajectory 8x8 Gray-Scott dataset, t_in = t_out = 2."""
    from raplab.physics import SimConfig, build_dataset

    cfg = SimConfig(h=8, w=8, n_steps=900, record_every=100, perturb_size=3, perturb_jitter=1, seed=5)
    return build_dataset(cfg, 12, 2, 2, 2, 2, (0.5, 0.25, 0.25), tmp_path_factory.mktemp("tiny"))


@pytest.fixture(scope="session")
def tiny_db(tiny_manifest):
    from raplab.analog import build_database

    return build_database(tiny_manifest)


def tiny_arch(variant="rap_dual_stream", **kw):
    from raplab.model import ArchitectureConfig

    base = dict(t_in=2, t_out=2, c=2, h=8, w=8, levels=2, base_channels=4, variant=variant)
    base.update(kw)
    return ArchitectureConfig(**base)


ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
