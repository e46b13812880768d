"""GDT tensor files and GDT-archive checkpoints.

Single tensor record, all integers little-endian:

    magic   4 bytes  b"GDTF"
    version u16      currently 1
    dtype   u8       1 = real-32, 2 = real-64
    rank    u8
    extents rank x u32
    values  row-major little-endian reals

An archive prepends a u32 entry count, then per entry a u16 name length,
the UTF-8 name, and an embedded single-tensor record.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO

import numpy as np

from .tensor import REAL32, REAL64, Tensor

MAGIC = b"GDTF"
VERSION = 1

_DTYPE_CODES = {REAL32: 1, REAL64: 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class FormatError(ValueError):
    """The byte stream is not a well-formed GDT record or archive."""


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated record: wanted {n} bytes, got {len(buf)}")
    return buf


def write_tensor(stream: BinaryIO, value: Tensor) -> None:
    arr = np.ascontiguousarray(value.data)
    stream.write(MAGIC)
    stream.write(struct.pack("<HBB", VERSION, _DTYPE_CODES[arr.dtype], arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    stream.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(stream: BinaryIO) -> Tensor:
    magic = _read_exact(stream, 4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, code, rank = struct.unpack("<HBB", _read_exact(stream, 4))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank))
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    raw = _read_exact(stream, count * dtype.itemsize)
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
    return Tensor(arr.astype(dtype.newbyteorder("="), copy=True))


def save_tensor(path, value: Tensor) -> None:
    _atomic_write(path, lambda f: write_tensor(f, value))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        return read_tensor(f)


def write_archive(stream: BinaryIO, entries: dict) -> None:
    stream.write(struct.pack("<I", len(entries)))
    for name, value in entries.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise FormatError(f"entry name too long ({len(encoded)} bytes)")
        stream.write(struct.pack("<H", len(encoded)))
        stream.write(encoded)
        write_tensor(stream, value)


def read_archive(stream: BinaryIO) -> dict:
    (count,) = struct.unpack("<I", _read_exact(stream, 4))
    entries = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(stream, 2))
        name = _read_exact(stream, name_len).decode("utf-8")
        entries[name] = read_tensor(stream)
    return entries


def save_archive(path, entries: dict) -> None:
    _atomic_write(path, lambda f: write_archive(f, entries))


def load_archive(path) -> dict:
    with open(path, "rb") as f:
        return read_archive(f)


def text_to_tensor(text: str) -> Tensor:
    """Encode text as a real-valued vector of UTF-8 byte codes.

    GDT records only carry reals, so string payloads (config manifests)
    ride along as one real-64 value per byte.
    """
    data = np.frombuffer(text.encode("utf-8"), dtype=np.uint8)
    return Tensor(data.astype(REAL64))


def tensor_to_text(value: Tensor) -> str:
    codes = np.asarray(value.data).reshape(-1)
    return bytes(int(c) for c in codes).decode("utf-8")


def _atomic_write(path, writer) -> None:
    path = os.fspath(path)
    buf = io.BytesIO()
    writer(buf)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)
