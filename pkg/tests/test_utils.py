import logging
from dataclasses import dataclass

import pytest

from mcaer.errors import ConfigError
from mcaer.logs import setup_logging
from mcaer.utils import config_from_dict, config_to_dict, flatten_dict


@dataclass
class Sample:
    size: int = 3
    names: tuple = ("a", "b")


def test_config_dicts():
    assert config_to_dict(Sample()) == {"size": 3, "names": ["a", "b"]}
    assert config_from_dict(Sample, None) == Sample()
    assert config_from_dict(Sample, {"size": 5}).size == 5
    with pytest.raises(ConfigError, match="sample.colour"):
        config_from_dict(Sample, {"colour": 1}, "sample")
    with pytest.raises(ConfigError):
        config_from_dict(Sample, [1, 2], "sample")


def test_flatten_dict():
    nested = {"train": {"lr0": 0.004, "inner": {"x": 1}}, "model": Sample(), "top": True}
    assert flatten_dict(nested) == {
        "train.lr0": 0.004,
        "train.inner.x": 1,
        "model.size": 3,
        "model.names": ["a", "b"],
        "top": True,
    }


def test_setup_logging_sets_the_level():
    setup_logging(logging.DEBUG)
    assert logging.getLogger().level == logging.DEBUG
    setup_logging()
    assert logging.getLogger().level == logging.INFO
