"""Minimal binary PGM (P5) / PPM (P6) reader and writer, 8-bit only."""
from __future__ import annotations

import os

import numpy as np

from .exceptions import ConfigError

GT_THRESHOLD = 128


def _tokens(data: bytes, count: int) -> tuple[list[int], int]:
    out, i = [], 0
    while len(out) < count:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        if j == i:
            raise ConfigError("truncated PNM header")
        out.append(int(data[i:j]))
        i = j
    return out, i + 1  # exactly one whitespace byte precedes the raster


def decode(data: bytes) -> np.ndarray:
    """``(h, w)`` uint8 for P5, ``(h, w, 3)`` uint8 for P6."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ConfigError(f"unsupported image format {magic!r}; expected binary PGM/PPM")
    try:
        (w, h, maxval), start = _tokens(data[2:], 3)
    except ValueError as exc:
        raise ConfigError(f"bad PNM header: {exc}") from exc
    if maxval != 255:
        raise ConfigError(f"only 8-bit images are supported (maxval {maxval})")
    channels = 1 if magic == b"P5" else 3
    raster = data[2 + start : 2 + start + w * h * channels]
    if len(raster) != w * h * channels:
        raise ConfigError("truncated PNM raster")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, channels)
    return arr[..., 0] if channels == 1 else arr


def encode(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError("PNM encoder expects uint8 data")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode image of shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def read(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())


def write(path: str | os.PathLike, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(img))


def mask_to_u8(mask: np.ndarray) -> np.ndarray:
    """Probabilities in [0, 1] to 8-bit grey levels."""
    return np.clip(np.rint(np.asarray(mask, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def read_mask(path: str | os.PathLike, binary: bool = False) -> np.ndarray:
    """Mask as float in [0, 1]; ``binary`` thresholds at 128 (ground-truth files)."""
    img = read(path)
    if img.ndim != 2:
        raise ConfigError(f"{path}: masks must be grayscale PGM")
    if binary:
        return (img >= GT_THRESHOLD).astype(np.float64)
    return img.astype(np.float64) / 255.0
