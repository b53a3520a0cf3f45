import pytest
import torch

from ttgen.backbone import ConvBackbone
from ttgen.paramgen import ParamGenerator
from ttgen.synthdata import make_rotated_domains

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture
def backbone():
    return ConvBackbone()


@pytest.fixture
def generator(backbone):
    return ParamGenerator(backbone.list_slots(), backbone.spec.feature_dim)


@pytest.fixture(scope="session")
def small_domains():
    return make_rotated_domains(0, [0.0, 45.0, 90.0], 60)


@pytest.fixture
def batch(small_domains):
    return small_domains[0].inputs[:16]
