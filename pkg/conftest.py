import pytest

from app import create_app
from config import TestingConfig
from models import ClusterConfig, DataSpec, ModelSpec
from services.tensor_model import TensorModelService


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run desk-scale reproduction tests"
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale acceptance run (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def cli():
    return create_app("testing")


@pytest.fixture
def runner():
    from click.testing import CliRunner

    return CliRunner()


@pytest.fixture
def small_spec():
    """Model sized like the testing profile."""
    return ModelSpec(**TestingConfig.OVERRIDES["model"])


@pytest.fixture
def small_data():
    return TensorModelService.dataset_for(DataSpec(**TestingConfig.OVERRIDES["data"], seed=7))


@pytest.fixture
def small_cluster():
    return ClusterConfig(**TestingConfig.OVERRIDES["cluster"])
