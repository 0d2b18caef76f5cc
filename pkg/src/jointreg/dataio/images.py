"""Binary PGM (P5) silhouette masks and PPM (P6) overlay images."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import DataError


def _tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    out, pos = [], 0
    while len(out) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated image header")
        out.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return out, pos + 1


def read_pgm(path) -> np.ndarray:
    """Grayscale P5 image mapped linearly to [0, 1] (8- or 16-bit)."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(data, 4)
    if magic != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {magic!r})")
    width, height, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 65536:
        raise DataError(f"{path}: bad maxval {maxval}")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = width * height * dtype.itemsize
    raster = data[pos : pos + need]
    if len(raster) != need:
        raise DataError(f"{path}: truncated raster ({len(raster)} of {need} bytes)")
    values = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    return values.astype(np.float64) / maxval


def write_pgm(path, values, bits: int = 8) -> None:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise DataError("mask must be 2-D")
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    maxval = 255 if bits == 8 else 65535
    q = np.rint(np.clip(values, 0.0, 1.0) * maxval)
    raster = q.astype("u1" if bits == 8 else ">u2").tobytes()
    h, w = values.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + raster)


def write_ppm(path, rgb) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(data, 4)
    if magic != b"P6" or int(maxval) != 255:
        raise DataError(f"{path}: only 8-bit binary PPM is supported")
    width, height = int(w), int(h)
    return np.frombuffer(data[pos : pos + 3 * width * height], dtype=np.uint8).reshape(height, width, 3)
