"""
Checkpoint file format.

    b"MCAER1"                 magic
    uint32 little endian      header length in bytes
    header                    UTF-8 JSON: format_version, model_config, train_config,
                              prep_config, class_names, tensors (name, kind, shape, offset)
    payload                   float32 little endian values, one block per tensor at its offset

Offsets count from the start of the payload and strictly increase. Integrity is checked
at the index level only; the payload carries no checksum.
"""
import json
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np
from semantic_version import Version

from mcaer.constants import CLASS_NAMES
from mcaer.errors import (
    CheckpointFormatError,
    CheckpointIndexError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from mcaer.model import MCAERModel, ModelConfig, build_model
from mcaer.utils import config_from_dict, config_to_dict

logger = logging.getLogger(__name__)

MAGIC = b"MCAER1"
FORMAT_VERSION = Version("1.0.0")
PAYLOAD_DTYPE = np.dtype("<f4")
_LENGTH = struct.Struct("<I")


@dataclass
class TensorEntry:
    name: str
    kind: str
    shape: List[int]
    offset: int

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) * PAYLOAD_DTYPE.itemsize


def _tensors(model: MCAERModel) -> Dict[str, tuple]:
    out = {name: ("param", param.data) for name, param in model.params.items()}
    out.update({name: ("buffer", value) for name, value in model.buffers().items()})
    return out


def save_checkpoint(model: MCAERModel, path, train_config=None, prep_config=None):
    path = Path(path)
    entries, blocks, offset = [], [], 0
    for name, (kind, value) in _tensors(model).items():
        block = np.ascontiguousarray(value, dtype=PAYLOAD_DTYPE).tobytes()
        entries.append({"name": name, "kind": kind, "shape": list(value.shape), "offset": offset})
        blocks.append(block)
        offset += len(block)
    header = {
        "format_version": str(FORMAT_VERSION),
        "model_config": config_to_dict(model.config),
        "train_config": None if train_config is None else config_to_dict(train_config),
        "prep_config": None if prep_config is None else config_to_dict(prep_config),
        "class_names": list(model.class_names),
        "tensors": entries,
    }
    encoded = json.dumps(header, sort_keys=True).encode()

    path.parent.mkdir(parents=True, exist_ok=True)
    partial = path.with_name(path.name + ".partial")
    with open(partial, "wb") as f:
        f.write(MAGIC)
        f.write(_LENGTH.pack(len(encoded)))
        f.write(encoded)
        for block in blocks:
            f.write(block)
    os.replace(partial, path)
    logger.info('saved checkpoint %s tensors=%d payload=%d bytes', path, len(entries), offset)


def read_header(data: bytes, source) -> dict:
    if len(data) < len(MAGIC) and MAGIC.startswith(data):
        raise CheckpointTruncatedError(f'{source}: file ends inside the magic')
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f'{source}: not a checkpoint (bad magic)')
    start = len(MAGIC) + _LENGTH.size
    if len(data) < start:
        raise CheckpointTruncatedError(f'{source}: file ends inside the header length')
    (length,) = _LENGTH.unpack_from(data, len(MAGIC))
    if len(data) < start + length:
        raise CheckpointTruncatedError(f'{source}: header needs {length} bytes, {len(data) - start} present')
    try:
        header = json.loads(data[start : start + length].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        raise CheckpointFormatError(f'{source}: unreadable header: {error}')
    if not isinstance(header, dict):
        raise CheckpointFormatError(f'{source}: header is not a mapping')

    try:
        version = Version(header.get("format_version", ""))
    except ValueError:
        raise CheckpointVersionError(f'{source}: bad format version {header.get("format_version")!r}')
    if version.major != FORMAT_VERSION.major:
        raise CheckpointVersionError(f'{source}: format {version} is not readable by {FORMAT_VERSION}')
    header["_payload_start"] = start + length
    return header


def read_index(header: dict, payload_size: int, source) -> List[TensorEntry]:
    try:
        entries = [TensorEntry(e["name"], e["kind"], [int(d) for d in e["shape"]], int(e["offset"])) for e in header["tensors"]]
    except (KeyError, TypeError, ValueError) as error:
        raise CheckpointIndexError(f'{source}: malformed tensor index: {error}')
    end = 0
    for entry in entries:
        if entry.offset < end:
            raise CheckpointIndexError(f'{source}: {entry.name} at offset {entry.offset} overlaps the previous tensor')
        end = entry.offset + entry.nbytes
        if end > payload_size:
            raise CheckpointTruncatedError(f'{source}: payload ends before {entry.name} ({end} > {payload_size} bytes)')
    return entries


def load_checkpoint(path, dtype=np.float32) -> MCAERModel:
    """
    Rebuild the model stored at `path`. The train and prep configs recorded with it are
    kept as plain dicts in `model.metadata`.
    """
    path = Path(path)
    data = path.read_bytes()
    header = read_header(data, path)
    payload = memoryview(data)[header["_payload_start"] :]
    entries = read_index(header, len(payload), path)

    class_names = tuple(header.get("class_names") or ())
    if class_names != CLASS_NAMES:
        raise CheckpointFormatError(f'{path}: class table {list(class_names)} is not {list(CLASS_NAMES)} in that order')
    config = config_from_dict(ModelConfig, header.get("model_config"), "model_config")
    model = build_model(config, seed=0, dtype=dtype)
    model.class_names = class_names

    expected = _tensors(model)
    found = {entry.name for entry in entries}
    missing, extra = sorted(set(expected) - found), sorted(found - set(expected))
    if missing or extra:
        raise CheckpointIndexError(f'{path}: index does not match the model (missing {missing}, unexpected {extra})')

    for entry in entries:
        kind, target = expected[entry.name]
        if list(target.shape) != entry.shape or kind != entry.kind:
            raise CheckpointIndexError(
                f'{path}: {entry.name} is a {entry.kind} {entry.shape} in the file, the model has a {kind} {list(target.shape)}'
            )
        count = entry.nbytes // PAYLOAD_DTYPE.itemsize
        values = np.frombuffer(payload, dtype=PAYLOAD_DTYPE, count=count, offset=entry.offset)
        target[...] = values.reshape(entry.shape).astype(target.dtype)

    model.metadata = {"train_config": header.get("train_config"), "prep_config": header.get("prep_config")}
    logger.info('loaded checkpoint %s format=%s tensors=%d', path, header["format_version"], len(entries))
    return model.eval()


def load_configs(model: MCAERModel, prep_cls, train_cls) -> tuple:
    """
    The (prep, train) configs a checkpoint was trained with, defaults where it has none.
    """
    metadata = getattr(model, "metadata", {}) or {}
    return (
        config_from_dict(prep_cls, metadata.get("prep_config"), "prep_config"),
        config_from_dict(train_cls, metadata.get("train_config"), "train_config"),
    )
