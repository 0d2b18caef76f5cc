"""RGFT tensor container: named little-endian float64/int64 arrays plus a JSON header.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"RGFT"
    4       1     format version (1)
    5       3     reserved, zero
    8       4     u32 array count
    12      4     u32 header length L
    16      L     UTF-8 JSON header (object, keys sorted)
    then, per array:
            2     u16 name length n
            n     UTF-8 name
            1     u8 dtype code (1 = float64, 2 = int64)
            1     u8 ndim d
            8*d   u64 dimensions
            8*k   payload, k = product of dimensions, C order

See docs/container-format.md for a worked hex example.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import ContainerFormatError

MAGIC = b"RGFT"
VERSION = 1
_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {"f": 1, "i": 2}


@dataclass
class TensorContainer:
    arrays: dict = field(default_factory=dict)
    header: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def keys(self):
        return self.arrays.keys()


def _normalize(name: str, arr) -> np.ndarray:
    a = np.asarray(arr)
    if a.dtype.kind == "f":
        return np.asarray(a, dtype="<f8", order="C")  # keeps 0-d shape, unlike ascontiguousarray
    if a.dtype.kind in "iub":
        return np.asarray(a, dtype="<i8", order="C")
    raise ContainerFormatError(f"unsupported dtype {a.dtype}", array=name)


def encode_container(arrays: Mapping[str, object], header: Mapping | None = None) -> bytes:
    names = list(arrays)
    if len(set(names)) != len(names):
        raise ContainerFormatError("duplicate array names")
    head = json.dumps(dict(header or {}), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<B3xII", VERSION, len(names), len(head)), head]
    for name in names:
        a = _normalize(name, arrays[name])
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ContainerFormatError("array name too long", array=name)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", _CODES[a.dtype.kind], a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes(order="C"))
    return b"".join(parts)


def decode_container(data: bytes) -> TensorContainer:
    view = memoryview(data)
    pos = 0

    def take(size, what, array=None):
        nonlocal pos
        if pos + size > len(view):
            raise ContainerFormatError(
                f"truncated {what}: need {size} bytes, {len(view) - pos} left", offset=pos, array=array
            )
        chunk = view[pos : pos + size]
        pos += size
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise ContainerFormatError("bad magic, not an RGFT container", offset=0)
    version, count, head_len = struct.unpack("<B3xII", take(12, "preamble"))
    if version != VERSION:
        raise ContainerFormatError(f"unsupported container version {version}", offset=4)
    head_at = pos
    try:
        header = json.loads(bytes(take(head_len, "header")).decode("utf-8")) if head_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"invalid header JSON: {exc}", offset=head_at) from None
    arrays = {}
    for _ in range(count):
        entry_at = pos
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError:
            raise ContainerFormatError("array name is not UTF-8", offset=entry_at) from None
        if name in arrays:
            raise ContainerFormatError("duplicate array name", offset=entry_at, array=name)
        code, ndim = struct.unpack("<BB", take(2, "dtype/ndim", name))
        if code not in _DTYPES:
            raise ContainerFormatError(f"unknown dtype code {code}", offset=pos - 2, array=name)
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim, "shape", name))
        count_el = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        payload = take(count_el * 8, "payload", name)
        arr = np.frombuffer(payload, dtype=_DTYPES[code]).reshape(shape).copy()
        arrays[name] = arr
    if pos != len(view):
        raise ContainerFormatError(f"{len(view) - pos} trailing bytes after last array", offset=pos)
    return TensorContainer(arrays, header)


def write_container(path, arrays: Mapping[str, object], header: Mapping | None = None) -> None:
    """Write arrays to ``path``; the file is replaced atomically."""
    path = Path(path)
    data = encode_container(arrays, header)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_container(path) -> TensorContainer:
    with open(path, "rb") as fh:
        return decode_container(fh.read())
