"""Binary real/synthetic classifier over extracted feature maps.

Feature maps are normalized per map (min-max to [0, 1]) before entering the
network; training augments with random crops only, evaluation center-crops.
Two architectures: a 50-layer residual network for full-scale features and a
small CNN for toy resolutions.

Checkpoint file format mirrors the predictor's: one JSON header line with
the config snapshot, class mapping and training-manifest digest, then the
torch-serialized weights.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datasets import DatasetManifest
from .errors import DataError, ModelError
from .features import FeatureMap, load_feature, minmax01

logger = logging.getLogger(__name__)

CLASSIFIER_SCHEMA = "tsgclassifier/1"
CLASS_MAP = {0: "real", 1: "synthetic"}
ARCHITECTURES = ("small_cnn", "resnet50")


@dataclass(frozen=True)
class ClassifierConfig:
    architecture: str = "small_cnn"
    crop_size: int = 32
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    input_normalization: str = "minmax01"
    pretrained_backbone: bool = False

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ModelError(
                f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}"
            )
        if self.crop_size < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ModelError("crop_size, epochs and batch_size must be positive")
        if self.input_normalization != "minmax01":
            raise ModelError("only per-map min-max normalization is supported")

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "crop_size": self.crop_size,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "input_normalization": self.input_normalization,
            "pretrained_backbone": self.pretrained_backbone,
        }

    @staticmethod
    def from_dict(d: dict) -> "ClassifierConfig":
        return ClassifierConfig(**d)


@dataclass(frozen=True)
class PredictionResult:
    prob_synthetic: float
    predicted_label: str

    def __post_init__(self):
        if not (0.0 <= self.prob_synthetic <= 1.0):
            raise DataError(f"probability out of range: {self.prob_synthetic}")
        expected = "synthetic" if self.prob_synthetic >= 0.5 else "real"
        if self.predicted_label != expected:
            raise DataError("label inconsistent with probability and 0.5 threshold")


def _conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.GroupNorm(8, cout),
        nn.SiLU(),
        nn.Conv2d(cout, cout, 3, stride=2, padding=1),
        nn.GroupNorm(8, cout),
        nn.SiLU(),
    )


class SmallCNN(nn.Module):
    """Three downsampling conv blocks, global average pool, linear head."""

    def __init__(self, in_channels: int = 3):
        super().__init__()
        self.block1 = _conv_block(in_channels, 32)
        self.block2 = _conv_block(32, 64)
        self.block3 = _conv_block(64, 128)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(128, 2)

    def forward(self, x):
        h = self.block3(self.block2(self.block1(x)))
        return self.fc(torch.flatten(self.pool(h), 1))


def _build_model(cfg: ClassifierConfig, in_channels: int) -> nn.Module:
    if cfg.architecture == "small_cnn":
        return SmallCNN(in_channels)
    import torchvision.models

    weights = None
    if cfg.pretrained_backbone:
        weights = torchvision.models.ResNet50_Weights.IMAGENET1K_V2
    try:
        model = torchvision.models.resnet50(weights=weights, num_classes=1000 if weights else 2)
    except Exception as exc:
        raise ModelError(f"could not build resnet50 backbone: {exc}") from exc
    if weights is not None:
        model.fc = nn.Linear(model.fc.in_features, 2)
    if in_channels != 3:
        model.conv1 = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
    return model


@dataclass
class ClassifierCheckpoint:
    model: nn.Module
    config: ClassifierConfig
    class_map: dict = field(default_factory=lambda: dict(CLASS_MAP))
    manifest_digest: str = ""
    in_channels: int = 3
    history: dict = field(default_factory=dict)

    def metadata(self) -> dict:
        return {
            "schema": CLASSIFIER_SCHEMA,
            "config": self.config.to_dict(),
            "class_map": {str(k): v for k, v in self.class_map.items()},
            "manifest_digest": self.manifest_digest,
            "in_channels": self.in_channels,
            "history": self.history,
        }

    def save(self, path: str | os.PathLike):
        payload = io.BytesIO()
        torch.save(self.model.state_dict(), payload)
        with open(path, "wb") as fh:
            fh.write(json.dumps(self.metadata()).encode("utf-8"))
            fh.write(b"\n")
            fh.write(payload.getvalue())

    def config_digest(self) -> str:
        blob = json.dumps(self.config.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def load_classifier(path: str | os.PathLike) -> ClassifierCheckpoint:
    if not os.path.exists(path):
        raise ModelError(f"classifier checkpoint not found: {path}")
    with open(path, "rb") as fh:
        header = fh.readline()
        blob = fh.read()
    try:
        meta = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelError(f"unreadable classifier metadata in {path}: {exc}") from exc
    if meta.get("schema") != CLASSIFIER_SCHEMA:
        raise ModelError(f"{path} is not a {CLASSIFIER_SCHEMA} checkpoint")
    cfg = ClassifierConfig.from_dict(meta["config"])
    model = _build_model(
        ClassifierConfig(**{**meta["config"], "pretrained_backbone": False}),
        meta["in_channels"],
    )
    try:
        state = torch.load(io.BytesIO(blob), map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    except Exception as exc:
        raise ModelError(f"failed to load classifier weights: {exc}") from exc
    model.eval()
    return ClassifierCheckpoint(
        model=model,
        config=cfg,
        class_map={int(k): v for k, v in meta["class_map"].items()},
        manifest_digest=meta["manifest_digest"],
        in_channels=meta["in_channels"],
        history=meta.get("history", {}),
    )


def _label01(label: str) -> int:
    return 1 if label == "synthetic" else 0


def _load_feature_arrays(entries) -> tuple[np.ndarray, np.ndarray]:
    maps, labels = [], []
    shape = None
    for e in entries:
        f = load_feature(e.path)
        if shape is None:
            shape = f.data.shape
        elif f.data.shape != shape:
            raise DataError(
                f"feature shape mismatch: {f.data.shape} vs {shape} at {e.path}"
            )
        maps.append(minmax01(f.data))
        labels.append(_label01(e.label))
    return np.stack(maps), np.asarray(labels, dtype=np.int64)


def _center_crop(x: torch.Tensor, size: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    top = (h - size) // 2
    left = (w - size) // 2
    return x[..., top : top + size, left : left + size]


def _manifest_digest(entries) -> str:
    blob = json.dumps(
        sorted((e.path, e.label) for e in entries), separators=(",", ":")
    ).encode()
    return hashlib.sha256(blob).hexdigest()


def train_classifier(
    features: DatasetManifest, cfg: ClassifierConfig = ClassifierConfig()
) -> ClassifierCheckpoint:
    """Train on the manifest's train split, validating on its val split.

    Augmentation is random cropping only; evaluation uses a deterministic
    center crop. Seeded end to end.
    """
    train_entries = features.subset(split="train")
    val_entries = features.subset(split="val")
    if not train_entries:
        raise DataError("no training entries in feature manifest")
    train_labels = {e.label for e in train_entries}
    if len(train_labels) < 2:
        raise DataError(f"training set has a single class: {train_labels}")

    x_train, y_train = _load_feature_arrays(train_entries)
    h, w, c = x_train.shape[1:]
    if cfg.crop_size > min(h, w):
        raise DataError(
            f"crop size {cfg.crop_size} exceeds feature resolution {(h, w)}"
        )
    torch.manual_seed(cfg.seed)
    model = _build_model(cfg, c)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    xt = torch.from_numpy(x_train).permute(0, 3, 1, 2).contiguous()
    yt = torch.from_numpy(y_train)

    history = {"train_loss": [], "val_accuracy": []}
    val_data = None
    if val_entries:
        x_val, y_val = _load_feature_arrays(val_entries)
        val_data = (
            torch.from_numpy(x_val).permute(0, 3, 1, 2).contiguous(),
            torch.from_numpy(y_val),
        )

    n = len(xt)
    crop = cfg.crop_size
    for epoch in range(cfg.epochs):
        model.train()
        perm = torch.randperm(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            batch = xt[idx]
            if crop < h or crop < w:
                top = int(torch.randint(0, h - crop + 1, (1,)))
                left = int(torch.randint(0, w - crop + 1, (1,)))
                batch = batch[..., top : top + crop, left : left + crop]
            logits = model(batch)
            loss = F.cross_entropy(logits, yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        epoch_loss = float(np.mean(losses))
        history["train_loss"].append(epoch_loss)
        if val_data is not None:
            acc = _eval_accuracy(model, val_data[0], val_data[1], crop, cfg.batch_size)
            history["val_accuracy"].append(acc)
            logger.info("epoch %d loss %.4f val_acc %.4f", epoch, epoch_loss, acc)
        else:
            logger.info("epoch %d loss %.4f", epoch, epoch_loss)
    model.eval()
    return ClassifierCheckpoint(
        model=model,
        config=cfg,
        manifest_digest=_manifest_digest(train_entries),
        in_channels=c,
        history=history,
    )


def _eval_accuracy(model, x, y, crop, batch_size) -> float:
    model.eval()
    correct = 0
    with torch.no_grad():
        for lo in range(0, len(x), batch_size):
            batch = _center_crop(x[lo : lo + batch_size], crop)
            pred = model(batch).argmax(dim=1)
            correct += int((pred == y[lo : lo + batch_size]).sum())
    return correct / len(x)


def _prepare_input(ckpt: ClassifierCheckpoint, data: np.ndarray) -> torch.Tensor:
    if data.ndim != 3:
        raise DataError(f"feature map must be (H, W, C), got {data.shape}")
    h, w, c = data.shape
    if c != ckpt.in_channels:
        raise DataError(f"feature has {c} channels, classifier expects {ckpt.in_channels}")
    if min(h, w) < ckpt.config.crop_size:
        raise DataError(
            f"feature resolution {(h, w)} smaller than crop {ckpt.config.crop_size}"
        )
    x = torch.from_numpy(minmax01(data)).permute(2, 0, 1)[None]
    return _center_crop(x, ckpt.config.crop_size)


def predict(ckpt: ClassifierCheckpoint, f: FeatureMap | np.ndarray) -> PredictionResult:
    """Deterministic single-map prediction (center crop, no augmentation)."""
    data = f.data if isinstance(f, FeatureMap) else f
    x = _prepare_input(ckpt, data)
    ckpt.model.eval()
    with torch.no_grad():
        probs = F.softmax(ckpt.model(x), dim=1)[0]
    p = float(probs[1])
    return PredictionResult(
        prob_synthetic=p, predicted_label="synthetic" if p >= 0.5 else "real"
    )


def predict_many(
    ckpt: ClassifierCheckpoint, feature_paths, batch_size: int = 64
) -> np.ndarray:
    """prob_synthetic for each feature file, in input order."""
    probs = []
    ckpt.model.eval()
    batch: list[torch.Tensor] = []

    def flush():
        if not batch:
            return
        with torch.no_grad():
            p = F.softmax(ckpt.model(torch.cat(batch, dim=0)), dim=1)[:, 1]
        probs.extend(float(v) for v in p)
        batch.clear()

    for path in feature_paths:
        batch.append(_prepare_input(ckpt, load_feature(path).data))
        if len(batch) >= batch_size:
            flush()
    flush()
    return np.asarray(probs)
