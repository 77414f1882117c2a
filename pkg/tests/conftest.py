import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from rawcodec.config import ModelConfig
from rawcodec.container import Codec
from rawcodec.network.model import RawCompressionModel

settings.register_profile(
    "default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

TINY = ModelConfig(
    embed_dim=4,
    latent_channels=8,
    hyper_channels=4,
    analysis_channels=8,
    synthesis_channels=8,
    prior_channels=4,
    context_channels=8,
    head_channels=8,
    mixtures=2,
    latent_bound=16,
)


def make_model(cfg=TINY, seed=0) -> RawCompressionModel:
    torch.manual_seed(seed)
    return RawCompressionModel(cfg).eval()


@pytest.fixture(scope="session")
def tiny_model():
    return make_model()


@pytest.fixture(scope="session")
def tiny_codec(tiny_model):
    return Codec.from_model(tiny_model)


@pytest.fixture(scope="session")
def default_codec():
    return Codec.from_model(make_model(ModelConfig()))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
