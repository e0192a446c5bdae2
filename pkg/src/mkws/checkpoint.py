"""Binary container for model files.

Layout (all integers little-endian)::

    b"MKWS" | u32 version | u32 header_len | header JSON (utf-8)
    then per tensor: u16 name_len | name | u8 dtype code | u8 rank | u32 dims[rank] | data
    u32 CRC32 of every preceding byte

The header is readable on its own, so a model's spec can be inspected
without touching the weights.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from mkws.errors import ChecksumError, ModelFormatError

MAGIC = b"MKWS"
FORMAT_VERSION = 1

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i4"), 4: np.dtype("<i8"), 5: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


def _encode_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype.newbyteorder("<"))
    if code is None:
        raise ModelFormatError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
    raw_name = name.encode("utf-8")
    parts = [struct.pack("<H", len(raw_name)), raw_name, struct.pack("<BB", code, arr.ndim)]
    parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def encode(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    header = dict(header, num_tensors=len(tensors))
    raw_header = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(raw_header)), raw_header]
    body += [_encode_tensor(name, tensors[name]) for name in tensors]
    payload = b"".join(body)
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def write_container(path: str | Path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(header, tensors)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _parse_preamble(data: bytes) -> tuple[dict, int]:
    if len(data) < 12 or data[:4] != MAGIC:
        raise ModelFormatError("not an MKWS model file (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version} (expected {FORMAT_VERSION})")
    if 12 + hlen > len(data):
        raise ChecksumError("file truncated inside header")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"corrupt header: {exc}") from exc
    return header, 12 + hlen


def read_header(path: str | Path) -> dict:
    """Return the JSON header without reading or verifying tensor data."""
    with open(path, "rb") as fh:
        pre = fh.read(12)
        if len(pre) < 12 or pre[:4] != MAGIC:
            raise ModelFormatError(f"{path}: not an MKWS model file")
        _, hlen = struct.unpack_from("<II", pre, 4)
        header, _ = _parse_preamble(pre + fh.read(hlen))
    return header


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 16:
        raise ChecksumError("file too short to hold a checksum")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ChecksumError("CRC32 mismatch: file is truncated or corrupt")
    header, off = _parse_preamble(payload)
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(header["num_tensors"]):
            (nlen,) = struct.unpack_from("<H", payload, off)
            off += 2
            name = payload[off : off + nlen].decode("utf-8")
            off += nlen
            code, rank = struct.unpack_from("<BB", payload, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}I", payload, off)
            off += 4 * rank
            dt = _DTYPES[code]
            count = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(payload, dtype=dt, count=count, offset=off).reshape(dims)
            off += count * dt.itemsize
            tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    except (struct.error, KeyError, ValueError) as exc:
        raise ModelFormatError(f"corrupt tensor section: {exc}") from exc
    if off != len(payload):
        raise ModelFormatError(f"{len(payload) - off} trailing bytes after tensors")
    return header, tensors


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return decode(fh.read())
