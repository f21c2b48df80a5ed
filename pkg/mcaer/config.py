"""
Run configuration: a YAML file with `model:`, `prep:` and `train:` sections whose keys
are the fields of ModelConfig, PrepConfig and TrainConfig. Command-line flags override
file values.
"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml
from tabulate import tabulate

from mcaer.errors import ConfigError
from mcaer.model import ModelConfig
from mcaer.preprocessing import PrepConfig
from mcaer.train import TrainConfig
from mcaer.utils import config_from_dict, config_to_dict, field_names, flatten_dict

logger = logging.getLogger(__name__)

SECTIONS = {"model": ModelConfig, "prep": PrepConfig, "train": TrainConfig}


@dataclass
class CliConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    prep: PrepConfig = field(default_factory=PrepConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, data) -> "CliConfig":
        if data is None:
            return cls()
        if not isinstance(data, dict):
            raise ConfigError(f'config must be a mapping of sections, got {type(data).__name__}')
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigError(f'unknown config sections {unknown}, expected {list(SECTIONS)}')
        return cls(**{name: config_from_dict(SECTIONS[name], data.get(name), name) for name in SECTIONS})

    @classmethod
    def load(cls, path) -> "CliConfig":
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text())
        except yaml.YAMLError as error:
            raise ConfigError(f'{path}: {error}')
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {name: config_to_dict(getattr(self, name)) for name in SECTIONS}

    def merge(self, overrides) -> "CliConfig":
        """
        New config with `{"section.key": value}` overrides applied; None values are
        flags that were not given and leave the file value alone.
        """
        changes = {name: {} for name in SECTIONS}
        for key, value in overrides.items():
            if value is None:
                continue
            section, _, name = key.partition(".")
            if section not in SECTIONS or name not in field_names(SECTIONS[section]):
                raise ConfigError(f'unknown config key {key}')
            changes[section][name] = value
        try:
            return CliConfig(**{name: replace(getattr(self, name), **changes[name]) for name in SECTIONS})
        except TypeError as error:
            raise ConfigError(str(error))

    def table(self) -> str:
        rows = sorted(flatten_dict(self.to_dict()).items())
        return tabulate(rows, headers=["key", "value"])

    def log_effective(self):
        logger.info('effective config\n%s', self.table())
