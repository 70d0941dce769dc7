"""JPEG quality-factor estimation from quantization tables.

The encoder quality factor is recovered by comparing the file's luminance
quantization table against the standard table under IJG integer scaling
(scale = 5000/q below 50, else 200 - 2q, entries clamped to [1, 255]) and
returning the q with minimal L1 distance, ties broken toward higher q.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .errors import DataError

# Standard luminance quantization table, natural (row-major) order.
IJG_LUMA_BASE = np.array(
    [
        16, 11, 10, 16, 24, 40, 51, 61,
        12, 12, 14, 19, 26, 58, 60, 55,
        14, 13, 16, 24, 40, 57, 69, 56,
        14, 17, 22, 29, 51, 87, 80, 62,
        18, 22, 37, 56, 68, 109, 103, 77,
        24, 35, 55, 64, 81, 104, 113, 92,
        49, 64, 78, 87, 103, 121, 120, 101,
        72, 92, 95, 98, 112, 100, 103, 99,
    ],
    dtype=np.int64,
)


def scaled_luma_table(quality: int) -> np.ndarray:
    """Luminance table an IJG-scaling encoder would use at this quality."""
    if not (1 <= quality <= 100):
        raise DataError(f"quality must be in [1, 100], got {quality}")
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    table = (IJG_LUMA_BASE * scale + 50) // 100
    return np.clip(table, 1, 255)


_CANDIDATES = np.stack([scaled_luma_table(q) for q in range(1, 101)])


def read_luma_quantization_table(path: str | os.PathLike) -> np.ndarray:
    """Extract the 64-entry luminance quantization table from a JPEG file."""
    try:
        with Image.open(path) as img:
            if img.format != "JPEG":
                raise DataError(f"{path} is not a JPEG (format={img.format})")
            tables = getattr(img, "quantization", None)
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not tables or 0 not in tables:
        raise DataError(f"{path} carries no luminance quantization table")
    table = np.asarray(tables[0], dtype=np.int64)
    if table.shape != (64,):
        raise DataError(f"{path} has a malformed quantization table")
    return table


def estimate_jpeg_quality(path: str | os.PathLike) -> int:
    """Estimated encoder quality factor in [1, 100]."""
    table = read_luma_quantization_table(path)
    dist = np.abs(_CANDIDATES - table[None, :]).sum(axis=1)
    # ties broken toward higher q
    best = int(np.flatnonzero(dist == dist.min())[-1]) + 1
    return best
