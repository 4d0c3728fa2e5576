"""Binary checkpoint codec

Layout (little-endian):
    magic b"PCDCKPT\\0" | uint32 version | uint32 step | uint32 record count
    record: uint32 name length | utf-8 name | uint32 rank | uint32 dims[rank] | float32 values

meta.* records hold one float64 scalar as the two float32 words of its bit pattern.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Union
import logging
import struct

import numpy as np

from pcdenoise.core.autodiff import ParamStore
from pcdenoise.core.errors import CheckpointFormatError, DatasetIOError

logger = logging.getLogger(__name__)

MAGIC = b"PCDCKPT\0"
VERSION = 1

ADAM_M_PREFIX = "adam.m."
ADAM_V_PREFIX = "adam.v."
META_PREFIX = "meta."

_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    """Decoded checkpoint: optimizer step and named float32 arrays"""

    step: int = 0
    records: Dict[str, np.ndarray] = field(default_factory=dict)

    def meta(self, key: str, default: float = 0.0) -> float:
        record = self.records.get(META_PREFIX + key)
        if record is None:
            return default
        words = np.ascontiguousarray(record.reshape(-1), dtype="<f4")
        if words.size == 2:
            return float(words.view("<f8")[0])
        return float(words[0])


def encode(checkpoint: Checkpoint) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(checkpoint.step), _U32.pack(len(checkpoint.records))]
    for name, values in checkpoint.records.items():
        encoded = name.encode("utf-8")
        values = np.ascontiguousarray(values, dtype="<f4")
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(values.ndim))
        parts.extend(_U32.pack(d) for d in values.shape)
        parts.append(values.tobytes())
    return b"".join(parts)


def decode(data: bytes, path: str = "<bytes>") -> Checkpoint:
    """
    Parse checkpoint bytes

    Raises:
        CheckpointFormatError: On a bad magic string, an unknown version or truncated data
    """
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(path, "bad magic string")
    offset = len(MAGIC)

    def read_u32() -> int:
        nonlocal offset
        if offset + 4 > len(data):
            raise CheckpointFormatError(path, "truncated file")
        (value,) = _U32.unpack_from(data, offset)
        offset += 4
        return value

    version = read_u32()
    if version != VERSION:
        raise CheckpointFormatError(path, f"unsupported version {version}")
    step = read_u32()
    count = read_u32()

    records: Dict[str, np.ndarray] = {}
    for _ in range(count):
        length = read_u32()
        if offset + length > len(data):
            raise CheckpointFormatError(path, "truncated record name")
        try:
            name = data[offset:offset + length].decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointFormatError(path, f"record name is not utf-8: {e}") from e
        offset += length
        rank = read_u32()
        shape = tuple(read_u32() for _ in range(rank))
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise CheckpointFormatError(path, f"truncated values of '{name}'")
        records[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape).copy()
        offset += nbytes

    if offset != len(data):
        raise CheckpointFormatError(path, f"{len(data) - offset} trailing bytes")
    return Checkpoint(step=step, records=records)


def meta_words(value: float) -> np.ndarray:
    """float64 scalar as two float32 words sharing its bytes"""
    return np.asarray([value], dtype="<f8").view("<f4")


def from_store(store: ParamStore, with_optimizer: bool = True, **meta: float) -> Checkpoint:
    """Checkpoint of a parameter store, optionally with its Adam moments and meta scalars"""
    records: Dict[str, np.ndarray] = {name: t.values for name, t in store.params.items()}
    if with_optimizer:
        for name in store.params:
            records[ADAM_M_PREFIX + name] = store.m[name]
            records[ADAM_V_PREFIX + name] = store.v[name]
    for key, value in meta.items():
        records[META_PREFIX + key] = meta_words(value)
    return Checkpoint(step=store.step if with_optimizer else 0, records=records)


def load_into_store(checkpoint: Checkpoint, store: ParamStore, with_optimizer: bool = True,
                    path: str = "<checkpoint>") -> None:
    """
    Copy checkpoint records into an existing store

    Raises:
        CheckpointFormatError: If a parameter is missing or has a different shape
    """
    for name, tensor in store.params.items():
        record = checkpoint.records.get(name)
        if record is None:
            raise CheckpointFormatError(path, f"missing parameter '{name}'")
        if record.shape != tensor.shape:
            raise CheckpointFormatError(path, f"shape of '{name}' is {record.shape}, model expects {tensor.shape}")
        tensor.values = record.astype(tensor.values.dtype)

    if not with_optimizer:
        store.reset_optimizer()
        return
    store.step = checkpoint.step
    for name, tensor in store.params.items():
        m = checkpoint.records.get(ADAM_M_PREFIX + name)
        v = checkpoint.records.get(ADAM_V_PREFIX + name)
        store.m[name] = np.zeros_like(tensor.values) if m is None else m.astype(tensor.values.dtype)
        store.v[name] = np.zeros_like(tensor.values) if v is None else v.astype(tensor.values.dtype)


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> None:
    try:
        Path(path).write_bytes(encode(checkpoint))
    except OSError as e:
        raise DatasetIOError(str(path), str(e)) from e
    logger.debug(f"Saved checkpoint {path} (step {checkpoint.step}, {len(checkpoint.records)} records)")


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointFormatError(str(path), str(e)) from e
    return decode(data, str(path))
