"""
Binary checkpoint format.

    magic     4 bytes   b"SEPP"
    version   u16 LE
    length    u64 LE    payload length in bytes
    payload   length bytes
    crc32     u32 LE    CRC32 of the payload

The payload starts with a u32 LE length-prefixed UTF-8 JSON header holding the graph description, free-form
metadata and the name and shape of every array that follows. The arrays follow in header order as raw 32-bit
little-endian floats.
"""
import json
import logging
import os
import struct
import zlib
from typing import Any, Dict, NamedTuple, Optional

import numpy as np

from sepprune.core.models import ModelGraph
from sepprune.core.optimizer import AdamState

log = logging.getLogger("root")

MAGIC = b"SEPP"
VERSION = 1
_HEADER = struct.Struct("<4sHQ")
_JSON_LENGTH = struct.Struct("<I")
_CRC = struct.Struct("<I")
_ARRAY_DTYPE = np.dtype("<f4")
_OPTIMIZER_PREFIX = "optimizer/"


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class Checkpoint(NamedTuple):
    model: ModelGraph
    metadata: Dict[str, Any]
    optimizer: Optional[AdamState]


def save_checkpoint(
    model: ModelGraph,
    path: str,
    metadata: Optional[Dict[str, Any]] = None,
    optimizer: Optional[AdamState] = None,
) -> None:
    arrays = dict(model.parameters)
    header = {"graph": model.describe(), "metadata": metadata or {}, "optimizer": None}
    if optimizer is not None:
        state = optimizer.state_dict()
        header["optimizer"] = {key: state[key] for key in ("beta1", "beta2", "eps", "step")}
        for name, value in state["first_moments"].items():
            arrays["{}first/{}".format(_OPTIMIZER_PREFIX, name)] = value
        for name, value in state["second_moments"].items():
            arrays["{}second/{}".format(_OPTIMIZER_PREFIX, name)] = value
    header["arrays"] = [{"name": name, "shape": list(value.shape)} for name, value in arrays.items()]

    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [_JSON_LENGTH.pack(len(header_bytes)), header_bytes]
    chunks.extend(np.ascontiguousarray(value, dtype=_ARRAY_DTYPE).tobytes() for value in arrays.values())
    payload = b"".join(chunks)

    log.debug("Writing checkpoint with {} arrays to {}".format(len(arrays), path))
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(payload)))
        f.write(payload)
        f.write(_CRC.pack(zlib.crc32(payload)))


def read_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()

    if len(data) < _HEADER.size:
        raise CheckpointTruncatedError("{}: file is shorter than the checkpoint header".format(path))
    magic, version, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError("{}: not a checkpoint (magic {!r})".format(path, magic))
    if version != VERSION:
        raise CheckpointVersionError("{}: unsupported checkpoint version {}".format(path, version))
    if len(data) < _HEADER.size + length + _CRC.size:
        raise CheckpointTruncatedError(
            "{}: expected {} payload bytes, file holds {}".format(path, length, len(data) - _HEADER.size)
        )
    payload = data[_HEADER.size : _HEADER.size + length]
    (crc,) = _CRC.unpack_from(data, _HEADER.size + length)
    if crc != zlib.crc32(payload):
        raise CheckpointChecksumError("{}: checksum mismatch".format(path))

    (header_length,) = _JSON_LENGTH.unpack_from(payload)
    header = json.loads(payload[_JSON_LENGTH.size : _JSON_LENGTH.size + header_length].decode("utf-8"))
    offset = _JSON_LENGTH.size + header_length
    arrays = {}  # type: Dict[str, np.ndarray]
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(payload, dtype=_ARRAY_DTYPE, count=count, offset=offset)
        arrays[entry["name"]] = values.reshape(shape).astype(np.float32)
        offset += count * _ARRAY_DTYPE.itemsize

    optimizer = None
    if header["optimizer"] is not None:
        optimizer = AdamState()
        state = dict(header["optimizer"])
        state["first_moments"] = {}
        state["second_moments"] = {}
        for name in list(arrays):
            if not name.startswith(_OPTIMIZER_PREFIX):
                continue
            kind, param = name[len(_OPTIMIZER_PREFIX) :].split("/", 1)
            state["{}_moments".format(kind)][param] = arrays.pop(name)
        optimizer.load_state_dict(state)

    model = ModelGraph.from_description(header["graph"], arrays)
    log.debug("Loaded checkpoint {} ({} parameters)".format(path, model.parameter_count()))
    return Checkpoint(model, header["metadata"], optimizer)


def load_checkpoint(path: str) -> ModelGraph:
    return read_checkpoint(path).model
