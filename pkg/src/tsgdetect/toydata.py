"""Desk-scale "real" image class: natural 32x32 patches.

Crops random patches from the natural photographs bundled with
scikit-image (no downloads involved) and writes them out as PNGs. Grayscale
sources are replicated to RGB. Patches get random flips and quarter-turns so
a few thousand of them cover a reasonably varied natural distribution for
the toy closed loop.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

_SOURCE_NAMES = (
    "astronaut",
    "chelsea",
    "coffee",
    "rocket",
    "cat",
    "immunohistochemistry",
    "camera",
    "coins",
    "moon",
    "grass",
    "gravel",
    "brick",
)


def _load_sources() -> list[np.ndarray]:
    import skimage.data

    images = []
    for name in _SOURCE_NAMES:
        img = getattr(skimage.data, name)()
        if img.ndim == 2:
            img = np.stack([img] * 3, axis=-1)
        images.append(img[..., :3].astype(np.uint8))
    return images


def make_patch_dataset(
    out_dir: str | os.PathLike,
    n_images: int = 4096,
    patch_size: int = 32,
    seed: int = 0,
) -> list[Path]:
    """Write n_images random natural patches as PNGs; returns their paths."""
    if n_images < 1:
        raise DataError(f"need at least one patch, got {n_images}")
    if patch_size < 1:
        raise DataError(f"patch size must be positive, got {patch_size}")
    sources = _load_sources()
    for img in sources:
        if img.shape[0] < patch_size or img.shape[1] < patch_size:
            raise DataError(f"source image smaller than patch size {patch_size}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    digits = max(5, len(str(n_images - 1)))
    paths = []
    for i in range(n_images):
        src = sources[int(rng.integers(len(sources)))]
        y = int(rng.integers(src.shape[0] - patch_size + 1))
        x = int(rng.integers(src.shape[1] - patch_size + 1))
        patch = src[y : y + patch_size, x : x + patch_size]
        if rng.integers(2):
            patch = patch[:, ::-1]
        patch = np.rot90(patch, k=int(rng.integers(4)))
        path = out / f"patch_{i:0{digits}d}.png"
        Image.fromarray(np.ascontiguousarray(patch)).save(path)
        paths.append(path)
    return paths


def save_image_batch(
    batch: np.ndarray, out_dir: str | os.PathLike, prefix: str = "sample"
) -> list[Path]:
    """Write a float32 [-1, 1] (N, H, W, C) batch as 8-bit PNGs."""
    if batch.ndim != 4:
        raise DataError(f"expected (N, H, W, C) batch, got shape {batch.shape}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arr = np.clip((batch + 1.0) * 127.5, 0, 255).astype(np.uint8)
    digits = max(5, len(str(len(arr) - 1)))
    paths = []
    for i, img in enumerate(arr):
        path = out / f"{prefix}_{i:0{digits}d}.png"
        Image.fromarray(img).save(path)
        paths.append(path)
    return paths
