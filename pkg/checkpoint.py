"""
Binary checkpoint format for named float64 arrays.

Layout (all integers little-endian):
    magic      8 bytes  b"MSGDCKPT"
    version    u32      1
    count      u32      number of arrays
    per array:
        name_len u16, name (UTF-8)
        rank     u8, dims rank x u64
        values   prod(dims) x f64, row-major

Meta-states, optimizer moments and run metadata are all stored as arrays
under prefixed names (`theta/...`, `adam/m/...`, `meta/iteration`), so a
round trip is bit-exact.
"""
import hashlib
import logging
import struct

import numpy as np

from errors import CheckpointError
from models import ParamSet
from run_logger import atomic_write_bytes

MAGIC = b"MSGDCKPT"
VERSION = 1

_HEADER = struct.Struct("<8sII")
_NAME_LEN = struct.Struct("<H")
_RANK = struct.Struct("<B")
_DIM = struct.Struct("<Q")


def encode_checkpoint(arrays: ParamSet) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, len(arrays))]
    for name, value in arrays.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"Array name too long: '{name[:40]}...'.")
        if value.ndim > 0xFF:
            raise CheckpointError(f"Array '{name}' has rank {value.ndim}, more than a checkpoint can hold.")
        parts.append(_NAME_LEN.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_RANK.pack(value.ndim))
        parts.extend(_DIM.pack(d) for d in value.shape)
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointError(f"Truncated checkpoint while reading {what} at byte {self.offset}.")
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: struct.Struct, what: str):
        return fmt.unpack(self.take(fmt.size, what))


def decode_checkpoint(data: bytes) -> ParamSet:
    """
    Parses checkpoint bytes.

    Raises:
        CheckpointError: On a magic or version mismatch, truncation, trailing
            bytes, or an inconsistent name or dims record.
    """
    reader = _Reader(data)
    magic, version, count = reader.unpack(_HEADER, "header")
    if magic != MAGIC:
        raise CheckpointError(f"Not a MetaLab checkpoint (magic {magic!r}); unsupported version or format.")
    if version != VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}; expected {VERSION}.")
    arrays = []
    for index in range(count):
        (name_len,) = reader.unpack(_NAME_LEN, f"name length of array {index}")
        try:
            name = reader.take(name_len, f"name of array {index}").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"Array {index} has a name that is not valid UTF-8.") from e
        (rank,) = reader.unpack(_RANK, f"rank of '{name}'")
        dims = tuple(reader.unpack(_DIM, f"dims of '{name}'")[0] for _ in range(rank))
        size = 1
        for d in dims:
            size *= d
        remaining = len(data) - reader.offset
        if size * 8 > remaining:
            raise CheckpointError(f"Truncated checkpoint: '{name}' declares dims {dims} but only {remaining} bytes remain.")
        values = np.frombuffer(reader.take(size * 8, f"values of '{name}'"), dtype="<f8").astype(np.float64)
        arrays.append((name, values.reshape(dims)))
    if reader.offset != len(data):
        raise CheckpointError(f"Checkpoint has {len(data) - reader.offset} unexpected trailing bytes.")
    try:
        return ParamSet(arrays)
    except ValueError as e:
        raise CheckpointError(str(e)) from e


def save_checkpoint(path: str, arrays: ParamSet) -> None:
    atomic_write_bytes(path, encode_checkpoint(arrays))
    logging.info(f"Saved checkpoint with {len(arrays)} arrays to {path}")


def load_checkpoint(path: str) -> ParamSet:
    with open(path, "rb") as f:
        data = f.read()
    return decode_checkpoint(data)


def config_hash(canonical_json: str) -> float:
    """First 48 bits of the SHA-256 of the canonical config JSON, exactly representable in a float64."""
    digest = hashlib.sha256(canonical_json.encode("utf-8")).digest()
    return float(int.from_bytes(digest[:6], "big"))
