"""
8-bit binary PGM (P5) and PPM (P6) files, plus per-image min-max
quantization of float maps.
"""
from __future__ import annotations

import logging
import pathlib
from typing import Union

import numpy as np

from .tensor import FormatError

logger = logging.getLogger(__name__)

AnyPath = Union[str, pathlib.Path]

MAGIC_CHANNELS = {b"P5": 1, b"P6": 3}


def quantize(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    """
    Min-max normalize ``values`` to [0, 255] and round to uint8.

    A constant map quantizes to all zeros.

    Returns
    -------
    quantized : np.ndarray
    low, high : float
        The minimum and maximum before normalization.
    """
    values = np.asarray(values, dtype=np.float64)
    low, high = float(values.min()), float(values.max())
    if high <= low:
        return np.zeros(values.shape, dtype=np.uint8), low, high
    scaled = np.round((values - low) / (high - low) * 255.0)
    return np.clip(scaled, 0, 255).astype(np.uint8), low, high


def normalize(values: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; a constant map becomes all zeros."""
    values = np.asarray(values, dtype=np.float64)
    low, high = values.min(), values.max()
    if high <= low:
        return np.zeros(values.shape, dtype=np.float64)
    return (values - low) / (high - low)


def _header(magic: bytes, width: int, height: int) -> bytes:
    return magic + f"\n{width} {height}\n255\n".encode("ascii")


def write_pgm(path: AnyPath, pixels: np.ndarray):
    """Write an ``[H, W]`` uint8 array as a P5 file."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError(f"PGM needs a 2D uint8 array, got {pixels.dtype} {pixels.shape}")
    height, width = pixels.shape
    pathlib.Path(path).write_bytes(_header(b"P5", width, height) + pixels.tobytes())


def write_ppm(path: AnyPath, pixels: np.ndarray):
    """Write an ``[H, W, 3]`` uint8 array as a P6 file."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ValueError(f"PPM needs an [H, W, 3] uint8 array, got {pixels.dtype} {pixels.shape}")
    height, width, _ = pixels.shape
    pathlib.Path(path).write_bytes(_header(b"P6", width, height) + pixels.tobytes())


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    offset = 0
    while len(tokens) < count:
        while offset < len(data) and data[offset:offset + 1].isspace():
            offset += 1
        if data[offset:offset + 1] == b"#":
            end = data.find(b"\n", offset)
            offset = len(data) if end < 0 else end + 1
            continue
        start = offset
        while offset < len(data) and not data[offset:offset + 1].isspace():
            offset += 1
        if start == offset:
            raise FormatError("Truncated PNM header")
        tokens.append(data[start:offset])
    # exactly one whitespace byte separates the header from the raster
    return tokens, offset + 1


def read_pnm(path: AnyPath) -> np.ndarray:
    """
    Read a binary 8-bit PGM or PPM file.

    Returns
    -------
    np.ndarray
        ``[H, W]`` for P5, ``[H, W, 3]`` for P6, dtype uint8.
    """
    data = pathlib.Path(path).read_bytes()
    tokens, offset = _tokens(data, 4)
    magic, width, height, maxval = tokens
    if magic not in MAGIC_CHANNELS:
        raise FormatError(f"{path}: unsupported magic {magic!r}")
    try:
        width, height, maxval = int(width), int(height), int(maxval)
    except ValueError:
        raise FormatError(f"{path}: non-numeric PNM header") from None
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit maps are supported, maxval={maxval}")
    channels = MAGIC_CHANNELS[magic]
    size = width * height * channels
    raster = data[offset:]
    if len(raster) != size:
        raise FormatError(f"{path}: expected {size} raster bytes, found {len(raster)}")
    pixels = np.frombuffer(raster, dtype=np.uint8)
    shape = (height, width) if channels == 1 else (height, width, channels)
    return pixels.reshape(shape).copy()
