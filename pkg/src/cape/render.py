"""Heatmap rendering: fixed colormap lookup and binary PPM (P6) export.

The 256-entry colormap ships as a CSV table so rendered goldens stay
bit-exact across platforms and library versions.
"""
from __future__ import annotations

import csv
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

__all__ = [
    "colormap_table",
    "colorize",
    "signed_colorize",
    "write_ppm",
    "read_ppm",
    "image_to_u8",
]


@lru_cache(maxsize=1)
def colormap_table() -> np.ndarray:
    """The packaged 256x3 uint8 blue-to-red lookup table."""
    text = (resources.files("cape") / "data" / "jet256.csv").read_text()
    rows = list(csv.DictReader(text.splitlines()))
    table = np.array([[int(r["r"]), int(r["g"]), int(r["b"])] for r in rows], dtype=np.uint8)
    if table.shape != (256, 3):
        raise ValueError(f"colormap table has shape {table.shape}, expected (256, 3)")
    return table


def colorize(values: np.ndarray) -> np.ndarray:
    """Map a [0, 1] array through the colormap to (h, w, 3) uint8."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"expected a 2-d map, got shape {values.shape}")
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise ValueError("values must lie in [0, 1] before colorizing")
    idx = np.clip((values * 255.0).round().astype(np.int64), 0, 255)
    return colormap_table()[idx]


def signed_colorize(values: np.ndarray) -> np.ndarray:
    """Two-color rendering of a signed map: positive cells shade red,
    negative cells shade blue, each scaled by |value| / max|value|."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"expected a 2-d map, got shape {values.shape}")
    peak = np.abs(values).max()
    scale = np.zeros_like(values) if peak == 0 else np.abs(values) / peak
    level = np.clip((scale * 255.0).round().astype(np.int64), 0, 255)
    out = np.zeros(values.shape + (3,), dtype=np.uint8)
    pos = values > 0
    neg = values < 0
    out[pos, 0] = level[pos]
    out[neg, 2] = level[neg]
    return out


def image_to_u8(image: np.ndarray) -> np.ndarray:
    """Clip a float image in [0, 1] to (h, w, 3) uint8."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (h, w, 3) image, got shape {image.shape}")
    return np.clip(image * 255.0, 0, 255).round().astype(np.uint8)


def write_ppm(path, pixels: np.ndarray) -> None:
    """Binary P6 PPM with maxval 255."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ValueError(f"expected (h, w, 3) uint8 pixels, got {pixels.shape} {pixels.dtype}")
    h, w, _ = pixels.shape
    with Path(path).open("wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read back a P6 file written by write_ppm."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise ValueError(f"not a maxval-255 P6 file: {path}")
    w, h = (int(v) for v in parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3)
    return pixels.reshape(h, w, 3).copy()
