"""Dataset manifests: scanning, JPEG-quality filtering, mixing, toy splits.

A manifest is a labeled index of image files. On disk it is JSON lines: an
optional header ``{"schema": "tsgmanifest/1", "provenance": {...}}`` followed
by one entry object per line with fields
``{path, label, generator, split, jpeg_quality}`` (``jpeg_quality`` absent
for non-JPEG files).
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, LayoutError
from .jpeg import estimate_jpeg_quality

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA = "tsgmanifest/1"
LABELS = ("real", "synthetic")
SPLITS = ("train", "val")

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}
JPEG_EXTENSIONS = {".jpg", ".jpeg"}

# Seed for the deterministic class-balancing subsample in filter_unbiased.
BALANCE_SEED = 0


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    generator: str
    split: str
    jpeg_quality: int | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise DataError(f"label must be one of {LABELS}, got {self.label!r}")
        if self.split not in SPLITS:
            raise DataError(f"split must be one of {SPLITS}, got {self.split!r}")

    def to_json(self) -> dict:
        d = {
            "path": self.path,
            "label": self.label,
            "generator": self.generator,
            "split": self.split,
        }
        if self.jpeg_quality is not None:
            d["jpeg_quality"] = self.jpeg_quality
        return d

    @staticmethod
    def from_json(d: dict) -> "ManifestEntry":
        return ManifestEntry(
            path=d["path"],
            label=d["label"],
            generator=d["generator"],
            split=d["split"],
            jpeg_quality=d.get("jpeg_quality"),
        )


def _tally(entries) -> dict[str, int]:
    counts: dict[str, int] = {}
    for e in entries:
        key = f"{e.label}/{e.split}"
        counts[key] = counts.get(key, 0) + 1
    return counts


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            dupes = sorted({p for p in paths if paths.count(p) > 1})
            raise DataError(f"duplicate manifest paths: {dupes[:3]}")
        self.provenance = dict(self.provenance)
        self.provenance["counts"] = _tally(self.entries)

    def counts(self) -> dict[str, int]:
        return _tally(self.entries)

    def subset(self, label: str | None = None, split: str | None = None):
        return [
            e
            for e in self.entries
            if (label is None or e.label == label)
            and (split is None or e.split == split)
        ]

    def generators(self) -> list[str]:
        return sorted({e.generator for e in self.entries})


def save_manifest(m: DatasetManifest, path: str | os.PathLike):
    with open(path, "w", encoding="utf-8") as fh:
        header = {"schema": MANIFEST_SCHEMA, "provenance": m.provenance}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for e in m.entries:
            fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    if not os.path.exists(path):
        raise DataError(f"manifest not found: {path}")
    entries: list[ManifestEntry] = []
    provenance: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if lineno == 1 and obj.get("schema") == MANIFEST_SCHEMA:
                provenance = obj.get("provenance", {})
                continue
            try:
                entries.append(ManifestEntry.from_json(obj))
            except (KeyError, DataError) as exc:
                raise FormatError(f"{path}:{lineno}: bad entry: {exc}") from exc
    if not entries:
        raise DataError(f"manifest {path} contains no entries")
    return DatasetManifest(entries=entries, provenance=provenance)


# --------------------------------------------------------------- scanning


DEFAULT_LAYOUT = {
    "splits": {"train": "train", "val": "val"},
    "classes": {"ai": "synthetic", "nature": "real"},
    "generators": {},
}


def _is_hidden(name: str) -> bool:
    return name.startswith(".")


def scan_genimage_root(
    root: str | os.PathLike,
    layout: dict | None = None,
    workers: int = 1,
) -> DatasetManifest:
    """Index a ``root/<generator>/<split>/<ai|nature>/`` tree into a manifest.

    ``layout`` may rename directory levels, e.g.
    ``{"splits": {"validation": "val"}, "classes": {"fake": "synthetic"}}``.
    JPEG files are annotated with their estimated encoder quality.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root not found: {root}")
    cfg = {**DEFAULT_LAYOUT, **(layout or {})}
    split_map = {**DEFAULT_LAYOUT["splits"], **cfg.get("splits", {})}
    class_map = {**DEFAULT_LAYOUT["classes"], **cfg.get("classes", {})}
    gen_map = cfg.get("generators", {})

    files: list[tuple[Path, str, str, str]] = []
    for gen_dir in sorted(root.iterdir()):
        if _is_hidden(gen_dir.name):
            continue
        if not gen_dir.is_dir():
            raise LayoutError(f"unexpected file at generator level: {gen_dir}")
        generator = gen_map.get(gen_dir.name, gen_dir.name)
        for split_dir in sorted(gen_dir.iterdir()):
            if _is_hidden(split_dir.name):
                continue
            if not split_dir.is_dir() or split_dir.name not in split_map:
                raise LayoutError(f"unrecognized split directory: {split_dir}")
            split = split_map[split_dir.name]
            for class_dir in sorted(split_dir.iterdir()):
                if _is_hidden(class_dir.name):
                    continue
                if not class_dir.is_dir() or class_dir.name not in class_map:
                    raise LayoutError(f"unrecognized class directory: {class_dir}")
                label = class_map[class_dir.name]
                for item in sorted(class_dir.iterdir()):
                    if _is_hidden(item.name):
                        continue
                    if item.is_dir():
                        raise LayoutError(f"unexpected extra directory level: {item}")
                    if item.suffix.lower() not in IMAGE_EXTENSIONS:
                        raise LayoutError(f"unrecognized file in dataset tree: {item}")
                    files.append((item, generator, split, label))
    if not files:
        raise DataError(f"no images found under {root}")

    def build(item_tuple):
        item, generator, split, label = item_tuple
        quality = None
        if item.suffix.lower() in JPEG_EXTENSIONS:
            try:
                quality = estimate_jpeg_quality(item)
            except DataError as exc:
                logger.warning("quality estimation failed for %s: %s", item, exc)
        return ManifestEntry(
            path=str(item),
            label=label,
            generator=generator,
            split=split,
            jpeg_quality=quality,
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(build, files))
    else:
        entries = [build(f) for f in files]
    entries.sort(key=lambda e: e.path)
    return DatasetManifest(
        entries=entries,
        provenance={"root": str(root), "op": "scan_genimage_root"},
    )


# --------------------------------------------------------------- filtering


@dataclass(frozen=True)
class UnbiasedFilterConfig:
    min_quality: int = 96
    require_balance: bool = True
    jpeg_only: bool = False

    def __post_init__(self):
        if not (1 <= self.min_quality <= 100):
            raise DataError(
                f"min_quality must be in [1, 100], got {self.min_quality}"
            )


def filter_unbiased(
    m: DatasetManifest, cfg: UnbiasedFilterConfig = UnbiasedFilterConfig()
) -> DatasetManifest:
    """Keep high-quality JPEGs (and, unless jpeg_only, lossless files), then
    balance class counts per split by a deterministic seeded subsample."""
    kept = []
    for e in m.entries:
        if e.jpeg_quality is not None:
            if e.jpeg_quality >= cfg.min_quality:
                kept.append(e)
        elif not cfg.jpeg_only:
            kept.append(e)

    splits = sorted({e.split for e in m.entries})
    out: list[ManifestEntry] = []
    for split in splits:
        real = sorted(
            (e for e in kept if e.split == split and e.label == "real"),
            key=lambda e: e.path,
        )
        synth = sorted(
            (e for e in kept if e.split == split and e.label == "synthetic"),
            key=lambda e: e.path,
        )
        if not real or not synth:
            raise DataError(
                f"split {split!r}: a class is empty after quality filtering "
                f"(real={len(real)}, synthetic={len(synth)})"
            )
        if cfg.require_balance:
            n = min(len(real), len(synth))
            rng = np.random.default_rng(BALANCE_SEED)
            if len(real) > n:
                idx = sorted(rng.choice(len(real), size=n, replace=False))
                real = [real[i] for i in idx]
            if len(synth) > n:
                idx = sorted(rng.choice(len(synth), size=n, replace=False))
                synth = [synth[i] for i in idx]
        out.extend(real)
        out.extend(synth)
    out.sort(key=lambda e: e.path)
    return DatasetManifest(
        entries=out,
        provenance={
            **{k: v for k, v in m.provenance.items() if k != "counts"},
            "op": "filter_unbiased",
            "filter": {
                "min_quality": cfg.min_quality,
                "require_balance": cfg.require_balance,
                "jpeg_only": cfg.jpeg_only,
            },
        },
    )


def mix_manifests(manifests: list[DatasetManifest]) -> DatasetManifest:
    """Union of two or more manifests with disjoint paths."""
    if len(manifests) < 2:
        raise DataError(f"mixing needs at least 2 manifests, got {len(manifests)}")
    seen: dict[str, int] = {}
    entries: list[ManifestEntry] = []
    for i, m in enumerate(manifests):
        for e in m.entries:
            if e.path in seen:
                raise DataError(
                    f"path collision between manifests {seen[e.path]} and {i}: {e.path}"
                )
            seen[e.path] = i
            entries.append(e)
    entries.sort(key=lambda e: e.path)
    return DatasetManifest(
        entries=entries,
        provenance={
            "op": "mix_manifests",
            "sources": [
                {k: v for k, v in m.provenance.items() if k in ("root", "op", "counts")}
                for m in manifests
            ],
        },
    )


# --------------------------------------------------------------- toy splits


def _list_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise DataError(f"directory not found: {directory}")
    files = sorted(
        p
        for p in directory.rglob("*")
        if p.is_file()
        and not _is_hidden(p.name)
        and p.suffix.lower() in IMAGE_EXTENSIONS
    )
    return files


def _stratified_split(paths, frac, rng):
    n = len(paths)
    n_train = int(round(frac * n))
    if n_train < 1 or n_train >= n:
        raise DataError(
            f"split fraction {frac} leaves an empty split for {n} images"
        )
    perm = rng.permutation(n)
    train_idx = set(perm[:n_train].tolist())
    return (
        [p for i, p in enumerate(paths) if i in train_idx],
        [p for i, p in enumerate(paths) if i not in train_idx],
    )


def build_toy_manifest(
    real_dir: str | os.PathLike,
    fake_dir: str | os.PathLike | None,
    split_fraction: float = 0.8,
    seed: int = 0,
    generator: str = "toy",
) -> DatasetManifest:
    """Label two image directories real/synthetic with a stratified split.

    ``fake_dir`` may be None for the bootstrap stage (a real-only manifest
    to train the toy generator on). The real class is split before the fake
    class off one seeded stream, so the real train/val assignment is
    identical with and without a fake directory for the same seed: images
    held out of generator training stay held out downstream.
    """
    real = _list_images(Path(real_dir))
    if not real:
        raise DataError(f"no images in real class directory {real_dir}")
    fake: list[Path] = []
    if fake_dir is not None:
        fake = _list_images(Path(fake_dir))
        if not fake:
            raise DataError(f"no images in fake class directory {fake_dir}")
    if not (0.0 < split_fraction < 1.0):
        raise DataError(f"split fraction must be in (0, 1), got {split_fraction}")
    rng = np.random.default_rng(seed)
    entries: list[ManifestEntry] = []
    classes = [(real, "real")] + ([(fake, "synthetic")] if fake else [])
    for paths, label in classes:
        train, val = _stratified_split(paths, split_fraction, rng)
        for split, group in (("train", train), ("val", val)):
            for p in group:
                entries.append(
                    ManifestEntry(
                        path=str(p), label=label, generator=generator, split=split
                    )
                )
    entries.sort(key=lambda e: e.path)
    return DatasetManifest(
        entries=entries,
        provenance={
            "op": "build_toy_manifest",
            "real_dir": str(real_dir),
            "fake_dir": None if fake_dir is None else str(fake_dir),
            "split_fraction": split_fraction,
            "seed": seed,
        },
    )
