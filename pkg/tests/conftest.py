import pytest

from mcaer import rng as rngs
from mcaer.model import build_model
from mcaer.selftest import small_model_config, small_prep_config
from mcaer.synthetic import generate_synthetic


@pytest.fixture
def rng():
    return rngs.stream(1234, "tests")


@pytest.fixture
def prep():
    return small_prep_config()


@pytest.fixture
def model_config():
    return small_model_config()


@pytest.fixture
def model(model_config):
    return build_model(model_config, seed=0)


@pytest.fixture
def two_stream_model():
    return build_model(small_model_config(streams=("face", "context")), seed=0)


@pytest.fixture(scope="session")
def synthetic(tmp_path_factory):
    """
    Two scenes per class, one of them with bystanders.
    """
    return generate_synthetic(2, seed=7, outdir=tmp_path_factory.mktemp("synthetic"))


@pytest.fixture(scope="session")
def synthetic_8(tmp_path_factory):
    return generate_synthetic(8, seed=1, outdir=tmp_path_factory.mktemp("synthetic_8"))

