"""Binary tensor files.

NDTN (one tensor), all integers little-endian::

    magic    4 bytes  b"NDTN"
    dtype    u8       1=float64 2=float32 3=int64 4=uint8
    rank     u8
    dims     u64 × rank
    data     raw little-endian values, C order

NDTA (named bundle, used for checkpoints)::

    magic    4 bytes  b"NDTA"
    count    u32
    entries  count × (u16 name length, UTF-8 name, NDTN blob)
"""

from __future__ import annotations

import io
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from neurodecode.utils.errors import ConfigError

TENSOR_MAGIC = b"NDTN"
ARCHIVE_MAGIC = b"NDTA"

DTYPE_TAGS: dict[int, np.dtype] = {
    1: np.dtype("<f8"),
    2: np.dtype("<f4"),
    3: np.dtype("<i8"),
    4: np.dtype("u1"),
}
_TAG_BY_KIND = {(dtype.kind, dtype.itemsize): tag for tag, dtype in DTYPE_TAGS.items()}


def _tag_for(array: np.ndarray) -> int:
    key = (array.dtype.kind, array.dtype.itemsize)
    if array.dtype.kind == "b":
        key = ("u", 1)
    if array.dtype.kind in {"i", "u"} and key not in _TAG_BY_KIND:
        key = ("i", 8)
    if key not in _TAG_BY_KIND:
        raise ConfigError(f"dtype {array.dtype} cannot be stored as NDTN")
    return _TAG_BY_KIND[key]


def encode_tensor(array: np.ndarray) -> bytes:
    """Serialize one array to NDTN bytes."""
    array = np.asarray(array)
    tag = _tag_for(array)
    if array.ndim > 255:
        raise ConfigError(f"rank {array.ndim} exceeds the NDTN limit")
    header = TENSOR_MAGIC + struct.pack("<BB", tag, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array, dtype=DTYPE_TAGS[tag]).tobytes(order="C")
    return header + payload


def _read_tensor(stream: io.BufferedIOBase | io.BytesIO) -> np.ndarray:
    magic = stream.read(4)
    if magic != TENSOR_MAGIC:
        raise ConfigError(f"bad NDTN magic {magic!r}")
    tag, rank = struct.unpack("<BB", stream.read(2))
    if tag not in DTYPE_TAGS:
        raise ConfigError(f"unknown NDTN dtype tag {tag}")
    dims = struct.unpack(f"<{rank}Q", stream.read(8 * rank)) if rank else ()
    dtype = DTYPE_TAGS[tag]
    count = int(np.prod(dims)) if dims else 1
    raw = stream.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise ConfigError("truncated NDTN payload")
    array = np.frombuffer(raw, dtype=dtype).reshape(dims)
    return array.astype(dtype.newbyteorder("="), copy=True)


def decode_tensor(blob: bytes) -> np.ndarray:
    """Parse NDTN bytes back into an array."""
    return _read_tensor(io.BytesIO(blob))


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    """Write one array as an NDTN file."""
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path: str | Path) -> np.ndarray:
    """Read one NDTN file."""
    return decode_tensor(Path(path).read_bytes())


def encode_archive(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Serialize named arrays (in mapping order) to NDTA bytes."""
    out = io.BytesIO()
    out.write(ARCHIVE_MAGIC + struct.pack("<I", len(tensors)))
    for name, array in tensors.items():
        encoded = name.encode("utf-8")
        out.write(struct.pack("<H", len(encoded)) + encoded)
        out.write(encode_tensor(array))
    return out.getvalue()


def decode_archive(blob: bytes) -> dict[str, np.ndarray]:
    """Parse NDTA bytes into an ordered name → array mapping."""
    stream = io.BytesIO(blob)
    magic = stream.read(4)
    if magic != ARCHIVE_MAGIC:
        raise ConfigError(f"bad NDTA magic {magic!r}")
    (count,) = struct.unpack("<I", stream.read(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (length,) = struct.unpack("<H", stream.read(2))
        name = stream.read(length).decode("utf-8")
        tensors[name] = _read_tensor(stream)
    return tensors


def save_archive(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named arrays as an NDTA file."""
    Path(path).write_bytes(encode_archive(tensors))


def load_archive(path: str | Path) -> dict[str, np.ndarray]:
    """Read an NDTA file."""
    return decode_archive(Path(path).read_bytes())
