import logging
from dataclasses import asdict, fields, is_dataclass

from mcaer.errors import ConfigError

logger = logging.getLogger(__name__)


def field_names(cls):
    return [f.name for f in fields(cls)]


def config_to_dict(config) -> dict:
    """
    Plain dict of a config dataclass with tuples turned into lists, ready for JSON or YAML.
    """
    data = asdict(config)
    for key, value in data.items():
        if isinstance(value, tuple):
            data[key] = list(value)
    return data


def config_from_dict(cls, data, section=None):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f'{section or cls.__name__} must be a mapping, got {type(data).__name__}')
    unknown = sorted(set(data) - set(field_names(cls)))
    if unknown:
        where = f'{section}.' if section else ''
        raise ConfigError(f'unknown config keys {[where + key for key in unknown]}')
    try:
        return cls(**data)
    except TypeError as error:
        raise ConfigError(f'{section or cls.__name__}: {error}')


def flatten_dict(d, prefix=''):
    def items():
        for key, value in d.items():
            name = f'{prefix}{key}'
            if isinstance(value, dict):
                yield from flatten_dict(value, name + '.').items()
            elif is_dataclass(value):
                yield from flatten_dict(config_to_dict(value), name + '.').items()
            else:
                yield name, value

    return dict(items())
