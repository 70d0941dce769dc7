"""Feature extraction: one-pass noise-prediction maps and the
reconstruction-error baseline.

The one-pass method runs the noise predictor once on the preprocessed image
at a fixed timestep; the baseline inverts the image over k DDIM steps and
denoises it back, taking the absolute reconstruction error (2k predictor
evaluations per image).

Feature file format (``tsgfeat/1``): one UTF-8 JSON header line
``{"schema": "tsgfeat/1", "shape": [H, W, C], "dtype": "f32le", "method",
"t_or_k", "predictor_tag", "source_path", ...}`` terminated by a newline,
followed by exactly H*W*C little-endian float32 values in row-major order.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .datasets import DatasetManifest, ManifestEntry, save_manifest
from .errors import DataError, FormatError
from .predictor import CallCounter
from .schedule import ddim_denoise, ddim_invert

logger = logging.getLogger(__name__)

FEATURE_SCHEMA = "tsgfeat/1"
FEATURE_SUFFIX = ".tsgfeat"
METHOD_TSG = "tsg"
METHOD_DIRE = "dire"


def preprocess(
    path: str | os.PathLike, target_resolution: tuple[int, int] = (256, 256)
) -> np.ndarray:
    """Decode, bilinearly resize, and map an 8-bit image into [-1, 1].

    Returns float32 (H, W, 3); grayscale inputs are replicated to RGB.
    """
    h, w = target_resolution
    if h < 1 or w < 1:
        raise DataError(f"target resolution must be positive, got {target_resolution}")
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if img.width < 1 or img.height < 1:
                raise DataError(f"zero-dimension image: {path}")
            resized = img.resize((w, h), Image.BILINEAR)
            arr = np.asarray(resized, dtype=np.float32)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return arr / 127.5 - 1.0


@dataclass(frozen=True)
class TSGConfig:
    """One-pass extraction settings: fixed timestep, model input size."""

    t: int = 0
    target_resolution: tuple[int, int] = (256, 256)

    def __post_init__(self):
        if self.t < 0:
            raise DataError(f"timestep must be >= 0, got {self.t}")


@dataclass(frozen=True)
class FeatureMeta:
    method: str
    t_or_k: int
    predictor_tag: str
    source_path: str
    created_utc: str = ""

    def header(self, shape) -> dict:
        return {
            "schema": FEATURE_SCHEMA,
            "shape": [int(s) for s in shape],
            "dtype": "f32le",
            "method": self.method,
            "t_or_k": self.t_or_k,
            "predictor_tag": self.predictor_tag,
            "source_path": self.source_path,
            "created_utc": self.created_utc,
        }


@dataclass
class FeatureMap:
    data: np.ndarray
    meta: FeatureMeta

    def __post_init__(self):
        if self.data.ndim != 3:
            raise DataError(f"feature map must be (H, W, C), got {self.data.shape}")
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)


def _now_utc() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def extract_tsg(
    image_path: str | os.PathLike, h, cfg: TSGConfig = TSGConfig()
) -> FeatureMap:
    """One predictor evaluation on the preprocessed image at cfg.t."""
    if not (0 <= cfg.t < h.T):
        raise DataError(f"timestep {cfg.t} outside predictor range [0, {h.T})")
    x = preprocess(image_path, cfg.target_resolution)
    feat = h.predict_noise(x[None], cfg.t)[0]
    return FeatureMap(
        data=feat,
        meta=FeatureMeta(
            method=METHOD_TSG,
            t_or_k=cfg.t,
            predictor_tag=getattr(h, "tag", ""),
            source_path=str(image_path),
            created_utc=_now_utc(),
        ),
    )


def extract_dire(image_path: str | os.PathLike, h, k: int = 20) -> FeatureMap:
    """Absolute error of the k-step DDIM invert/denoise round trip."""
    if k < 1:
        raise DataError(f"DDIM step count must be >= 1, got {k}")
    sched = h.schedule
    x0 = preprocess(image_path, h.resolution)
    latent = ddim_invert(x0, k, h, sched)
    recon = ddim_denoise(latent, k, h, sched)
    return FeatureMap(
        data=np.abs(x0 - recon),
        meta=FeatureMeta(
            method=METHOD_DIRE,
            t_or_k=k,
            predictor_tag=getattr(h, "tag", ""),
            source_path=str(image_path),
            created_utc=_now_utc(),
        ),
    )


def save_feature(f: FeatureMap, path: str | os.PathLike):
    header = json.dumps(f.meta.header(f.data.shape))
    payload = f.data.astype("<f4", copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)


def load_feature(path: str | os.PathLike) -> FeatureMap:
    if not os.path.exists(path):
        raise DataError(f"feature file not found: {path}")
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt feature header: {exc}") from exc
    if header.get("schema") != FEATURE_SCHEMA:
        raise FormatError(f"{path}: unknown schema {header.get('schema')!r}")
    if header.get("dtype") != "f32le":
        raise FormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    shape = tuple(int(s) for s in header["shape"])
    if len(shape) != 3 or min(shape) < 1:
        raise FormatError(f"{path}: bad shape {shape}")
    expected = 4 * shape[0] * shape[1] * shape[2]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload holds {len(payload)} bytes but header shape "
            f"{list(shape)} requires {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(shape)
    meta = FeatureMeta(
        method=header["method"],
        t_or_k=int(header["t_or_k"]),
        predictor_tag=header["predictor_tag"],
        source_path=header["source_path"],
        created_utc=header.get("created_utc", ""),
    )
    return FeatureMap(data=data.copy(), meta=meta)


def minmax01(data: np.ndarray) -> np.ndarray:
    """Per-map min-max normalization to [0, 1]; constant maps go to zero.

    Computed in float64 so positive affine rescalings of the input that are
    exact in floating point normalize to identical outputs.
    """
    x = data.astype(np.float64)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros_like(data, dtype=np.float32)
    return ((x - lo) / (hi - lo)).astype(np.float32)


@dataclass
class ExtractionReport:
    method: str
    succeeded: int
    failed: int
    wall_seconds: float
    predictor_calls: int
    forward_passes: int
    out_dir: str
    feature_manifest: str
    failures: list[tuple[str, str]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "succeeded": self.succeeded,
            "failed": self.failed,
            "wall_seconds": self.wall_seconds,
            "predictor_calls": self.predictor_calls,
            "forward_passes": self.forward_passes,
            "out_dir": self.out_dir,
            "feature_manifest": self.feature_manifest,
            "failures": [{"path": p, "error": e} for p, e in self.failures],
        }


def _feature_path(out_dir: Path, entry_path: str, root: str | None) -> Path:
    p = Path(entry_path)
    if root:
        try:
            rel = p.resolve().relative_to(Path(root).resolve())
        except ValueError:
            rel = Path(p.name)
    else:
        rel = Path(p.name)
    return out_dir / rel.parent / (rel.name + FEATURE_SUFFIX)


def batch_extract(
    manifest: DatasetManifest,
    h,
    cfg: TSGConfig | None,
    method: str,
    out_dir: str | os.PathLike,
    workers: int = 1,
    dire_k: int = 20,
) -> ExtractionReport:
    """Extract one feature file per manifest entry, mirroring the source
    layout under out_dir, and write a feature manifest alongside.

    Per-file failures are logged and counted; the batch continues. Predictor
    access is serialized across workers so call counts stay exact.
    """
    if method not in (METHOD_TSG, METHOD_DIRE):
        raise DataError(f"method must be '{METHOD_TSG}' or '{METHOD_DIRE}'")
    if method == METHOD_TSG and cfg is None:
        raise DataError("one-pass extraction needs a TSGConfig")
    if not manifest.entries:
        raise DataError("manifest is empty")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.touch()
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory {out_dir} is not writable: {exc}") from exc

    counter = CallCounter(h)
    root = manifest.provenance.get("root")
    lock = threading.Lock()

    class _HandleView:
        # counter with the original handle's schedule/tag riding along
        resolution = counter.resolution
        channels = counter.channels
        T = counter.T
        schedule = getattr(h, "schedule", None)
        tag = getattr(h, "tag", "")

        @staticmethod
        def predict_noise(batch, t):
            return counter.predict_noise(batch, t)

    counter_handle = _HandleView()

    def work(entry: ManifestEntry):
        dest = _feature_path(out_dir, entry.path, root)
        try:
            with lock:
                if method == METHOD_TSG:
                    feat = extract_tsg(entry.path, counter_handle, cfg)
                else:
                    feat = extract_dire(entry.path, counter_handle, dire_k)
            dest.parent.mkdir(parents=True, exist_ok=True)
            save_feature(feat, dest)
            return entry, dest, None
        except Exception as exc:
            logger.warning("extraction failed for %s: %s", entry.path, exc)
            return entry, None, f"{type(exc).__name__}: {exc}"

    t0 = time.time()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, manifest.entries))
    else:
        results = [work(e) for e in manifest.entries]
    wall = time.time() - t0

    feature_entries = []
    failures = []
    for entry, dest, err in results:
        if err is None:
            feature_entries.append(
                ManifestEntry(
                    path=str(dest),
                    label=entry.label,
                    generator=entry.generator,
                    split=entry.split,
                )
            )
        else:
            failures.append((entry.path, err))
    feature_manifest_path = out_dir / "features.jsonl"
    if feature_entries:
        fm = DatasetManifest(
            entries=sorted(feature_entries, key=lambda e: e.path),
            provenance={
                "op": "batch_extract",
                "method": method,
                "t_or_k": cfg.t if method == METHOD_TSG else dire_k,
                "predictor_tag": getattr(h, "tag", ""),
                "root": str(out_dir),
            },
        )
        save_manifest(fm, feature_manifest_path)
    return ExtractionReport(
        method=method,
        succeeded=len(feature_entries),
        failed=len(failures),
        wall_seconds=wall,
        predictor_calls=counter.calls,
        forward_passes=counter.forward_passes,
        out_dir=str(out_dir),
        feature_manifest=str(feature_manifest_path),
        failures=failures,
    )
