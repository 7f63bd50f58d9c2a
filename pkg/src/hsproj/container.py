"""Shared binary container used by parameter, trace and corpus files.

Layout (all integers little-endian)::

    magic (4 bytes) | u32 version | u32 header_len | header: UTF-8 JSON
    | block payloads, back to back, in header order | u32 CRC32 of all prior bytes

The JSON header is written with sorted keys and always contains
``"blocks": [[name, dtype, shape], ...]`` where ``dtype`` is a little-endian
numpy type string such as ``"<f4"``. Files are written to a temporary name in
the destination directory and renamed into place, so readers never see a
partial file.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import CorruptionError, DecodeError, VersionError

_PREFIX = struct.Struct("<II")


def encode(magic: bytes, version: int, header: dict, blocks) -> bytes:
    header = dict(header)
    arrays = []
    table = []
    for name, arr in blocks:
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        arrays.append(np.ascontiguousarray(arr, dtype=le))
        table.append([name, le.str, list(arr.shape)])
    header["blocks"] = table
    head = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    payload = bytearray(magic)
    payload += _PREFIX.pack(version, len(head))
    payload += head
    for arr in arrays:
        payload += arr.tobytes()
    payload += struct.pack("<I", zlib.crc32(payload))
    return bytes(payload)


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write(path, magic: bytes, version: int, header: dict, blocks) -> None:
    atomic_write(path, encode(magic, version, header, blocks))


def decode(raw: bytes, magic: bytes, version: int, source="<bytes>") -> tuple[dict, OrderedDict]:
    if len(raw) < 4 and magic.startswith(raw):
        raise CorruptionError(f"{source}: truncated inside the magic bytes")
    if raw[:4] != magic:
        raise DecodeError(f"{source}: bad magic {raw[:4]!r}, expected {magic!r}")
    if len(raw) < 4 + _PREFIX.size:
        raise CorruptionError(f"{source}: truncated before header")
    file_version, head_len = _PREFIX.unpack_from(raw, 4)
    if file_version != version:
        raise VersionError(f"{source}: format version {file_version}, this build reads {version}")
    start = 4 + _PREFIX.size
    if len(raw) < start + head_len + 4:
        raise CorruptionError(f"{source}: truncated header")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise CorruptionError(f"{source}: checksum mismatch (truncated or corrupted)")
    try:
        header = json.loads(raw[start : start + head_len].decode("utf-8"))
        table = header["blocks"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptionError(f"{source}: unreadable header") from exc
    offset = start + head_len
    end = len(raw) - 4
    blocks = OrderedDict()
    for name, dtype_str, shape in table:
        dtype = np.dtype(dtype_str)
        count = int(np.prod(shape))
        nbytes = count * dtype.itemsize
        if offset + nbytes > end:
            raise CorruptionError(f"{source}: block {name!r} runs past end of file")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape)
        blocks[name] = arr.astype(dtype.newbyteorder("="), copy=True)
        offset += nbytes
    if offset != end:
        raise CorruptionError(f"{source}: {end - offset} unexpected bytes after the last block")
    return header, blocks


def read(path, magic: bytes, version: int) -> tuple[dict, OrderedDict]:
    return decode(Path(path).read_bytes(), magic, version, source=str(path))
