import pytest
import torch

from pathseek.dynamics import ModelConfig, ModelParams
from pathseek.pyramid import EncoderStub, FeatureCache, PyramidConfig, plant_instance
from pathseek.reasoner import ReasonerConfig


TINY_MODEL = dict(
    d_model=8,
    d_input=4,
    memory_length=3,
    memory_hidden=4,
    heads=2,
    head_dim=2,
    n_synch_out=4,
    n_synch_action=4,
    synapse_depth=2,
    fusion_hidden=6,
    num_classes=3,
    seed=1,
)

TINY_PYRAMID = dict(coarse_grid=2, num_scales=2, feature_dim=4, num_classes=3, lesion_fraction=0.25, num_clusters=1)


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY_MODEL)


@pytest.fixture
def tiny_params(tiny_config):
    return ModelParams(tiny_config)


@pytest.fixture
def tiny_pyramid():
    return PyramidConfig(**TINY_PYRAMID)


@pytest.fixture
def tiny_instance(tiny_pyramid):
    return plant_instance(tiny_pyramid, 5)


@pytest.fixture
def tiny_reasoner():
    return ReasonerConfig(ticks_per_scale=3, num_scales=2, top_k=2)


@pytest.fixture
def desk_setup():
    """Untrained desk-sized model with one three-scale instance."""
    pc = PyramidConfig()
    params = ModelParams(ModelConfig())
    return pc, params, plant_instance(pc, 3), EncoderStub(pc)


def zero_module(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


@pytest.fixture
def cache():
    return FeatureCache()


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: the numbered acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
