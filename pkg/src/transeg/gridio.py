"""Flat binary grid files with a fixed 16-byte header.

Layout: magic ``TLAB`` (4 bytes), then little-endian u16 fields
version, height, width, channels, then 4 reserved zero bytes.
Payload is row-major, little-endian: float32 for feature grids,
uint8 for label/mask grids.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError

MAGIC = b"TLAB"
VERSION = 1
_HEADER = struct.Struct("<4sHHHH4x")  # 16 bytes

# header dimensions are u16 fields
MAX_DIM = 0xFFFF


def _pack_header(height: int, width: int, channels: int) -> bytes:
    for name, v in (("height", height), ("width", width), ("channels", channels)):
        if not 1 <= v <= MAX_DIM:
            raise DataFormatError(f"{name}={v} does not fit the u16 header field")
    return _HEADER.pack(MAGIC, VERSION, height, width, channels)


def _unpack_header(raw: bytes, path: Path) -> tuple[int, int, int]:
    if len(raw) != _HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    magic, version, height, width, channels = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    return height, width, channels


def write_f32(path: str | Path, grid: np.ndarray) -> None:
    """Write a (H, W, C) or (H, W) float grid as float32."""
    arr = np.asarray(grid, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise DataFormatError(f"expected 2-D or 3-D grid, got shape {arr.shape}")
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(_pack_header(h, w, c))
        f.write(arr.astype("<f4").tobytes())


def read_f32(path: str | Path) -> np.ndarray:
    """Read a float32 grid; returns float64 (H, W, C)."""
    path = Path(path)
    with open(path, "rb") as f:
        h, w, c = _unpack_header(f.read(_HEADER.size), path)
        payload = f.read()
    expected = h * w * c * 4
    if len(payload) != expected:
        raise DataFormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(h, w, c)


def write_u8(path: str | Path, grid: np.ndarray) -> None:
    """Write a (H, W) integer grid as uint8 (channels=1)."""
    arr = np.asarray(grid)
    if arr.ndim != 2:
        raise DataFormatError(f"expected 2-D grid, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() > 255:
        raise DataFormatError("values outside uint8 range")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(_pack_header(h, w, 1))
        f.write(arr.astype(np.uint8).tobytes())


def read_u8(path: str | Path) -> np.ndarray:
    """Read a uint8 grid; returns int64 (H, W)."""
    path = Path(path)
    with open(path, "rb") as f:
        h, w, c = _unpack_header(f.read(_HEADER.size), path)
        payload = f.read()
    if c != 1:
        raise DataFormatError(f"{path}: label grid must have channels=1, got {c}")
    if len(payload) != h * w:
        raise DataFormatError(f"{path}: payload is {len(payload)} bytes, expected {h * w}")
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64).reshape(h, w)
