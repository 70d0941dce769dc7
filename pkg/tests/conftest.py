import numpy as np
import pytest
from PIL import Image

from tsgdetect.datasets import DatasetManifest, ManifestEntry


def write_png(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path)
    return path


def random_rgb(rng, size=32):
    return rng.integers(0, 256, (size, size, 3), dtype=np.uint8)


@pytest.fixture
def tiny_image_dir(tmp_path):
    """Ten 32x32 PNGs with a small manifest covering both classes."""
    rng = np.random.default_rng(7)
    entries = []
    for i in range(10):
        label = "real" if i < 5 else "synthetic"
        p = write_png(tmp_path / "imgs" / f"{label}_{i}.png", random_rgb(rng))
        entries.append(
            ManifestEntry(
                path=str(p),
                label=label,
                generator="toy",
                split="train" if i % 5 < 4 else "val",
            )
        )
    manifest = DatasetManifest(
        entries=entries, provenance={"root": str(tmp_path / "imgs")}
    )
    return tmp_path / "imgs", manifest
