import numpy as np
import pytest
from hypothesis import settings

from ddip.denoiser import DenoiserConfig, build_denoiser, inject_lora
from ddip.schedule import make_vp_schedule

settings.register_profile("ddip", max_examples=25, deadline=None)
settings.load_profile("ddip")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    return DenoiserConfig(image_size=8, base_channels=8, channel_multipliers=(1, 2),
                          num_groups=2, time_embed_dim=16)


@pytest.fixture
def tiny_params(tiny_config):
    return build_denoiser(tiny_config, seed=3)


@pytest.fixture
def tiny_lora(tiny_config):
    return inject_lora(build_denoiser(tiny_config, seed=3), rank=2, seed=5)


@pytest.fixture(scope="session")
def short_schedule():
    return make_vp_schedule(nfe=6, eta=0.85, t_start=980)


def spd_matrix(rng, n, cond=50.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = np.geomspace(1.0, cond, n)
    return Q @ np.diag(eig) @ Q.T


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
