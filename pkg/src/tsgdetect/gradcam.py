"""Gradient-weighted class activation maps over the feature classifier.

The map is the channel sum of target-layer activations weighted by the
spatially averaged gradient of the chosen class logit, rectified, bilinearly
upsampled to the feature resolution, and normalized so its maximum is 1
(identically zero maps are flagged degenerate instead).
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .classifier import ClassifierCheckpoint, _prepare_input
from .errors import DataError, ModelError
from .features import FeatureMap

logger = logging.getLogger(__name__)

DEFAULT_TARGET_LAYERS = {"small_cnn": "block3", "resnet50": "layer4"}
_LABEL_TO_INDEX = {"real": 0, "synthetic": 1}


@dataclass
class HeatMap:
    data: np.ndarray
    target_layer: str
    target_class: str
    source_path: str
    degenerate: bool = False

    def __post_init__(self):
        if self.data.ndim != 2:
            raise DataError(f"heatmap must be 2-D, got shape {self.data.shape}")


def _resolve_layer(model: torch.nn.Module, name: str) -> torch.nn.Module:
    modules = dict(model.named_modules())
    if name not in modules:
        raise ModelError(f"no layer named {name!r}; available: {sorted(m for m in modules if m)}")
    return modules[name]


def run_to_logits(
    model: torch.nn.Module,
    x: torch.Tensor,
    layer_name: str,
    replace_activations: torch.Tensor | None = None,
):
    """Forward pass capturing (or overriding) one layer's activations.

    Returns (logits, activations). With ``replace_activations`` the layer's
    output is substituted, which turns the tail of the network into a
    function of the activations; the finite-difference gradient checks lean
    on this.
    """
    target = _resolve_layer(model, layer_name)
    captured: dict[str, torch.Tensor] = {}

    def hook(mod, inp, out):
        if replace_activations is not None:
            captured["acts"] = replace_activations
            return replace_activations
        captured["acts"] = out
        return None

    handle = target.register_forward_hook(hook)
    try:
        logits = model(x)
    finally:
        handle.remove()
    if "acts" not in captured:
        raise ModelError(f"layer {layer_name!r} never ran in the forward pass")
    return logits, captured["acts"]


def gradcam(
    ckpt: ClassifierCheckpoint,
    f: FeatureMap | np.ndarray,
    target_class: str | None = None,
    target_layer: str | None = None,
) -> HeatMap:
    """Heatmap of spatial evidence for target_class (default: predicted)."""
    data = f.data if isinstance(f, FeatureMap) else f
    source = f.meta.source_path if isinstance(f, FeatureMap) else ""
    layer = target_layer or DEFAULT_TARGET_LAYERS.get(ckpt.config.architecture)
    if layer is None:
        raise ModelError(f"no default target layer for {ckpt.config.architecture}")
    x = _prepare_input(ckpt, data)
    model = ckpt.model
    model.eval()

    with torch.enable_grad():
        logits, acts = run_to_logits(model, x, layer)
        if target_class is None:
            target_class = "synthetic" if int(logits.argmax(dim=1)) == 1 else "real"
        elif target_class not in _LABEL_TO_INDEX:
            raise DataError(f"target class must be real or synthetic, got {target_class!r}")
        score = logits[0, _LABEL_TO_INDEX[target_class]]
        (grad,) = torch.autograd.grad(score, acts)

    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * acts).sum(dim=1, keepdim=True))
    h, w = data.shape[:2]
    cam = F.interpolate(cam, size=(h, w), mode="bilinear", align_corners=False)
    cam = cam[0, 0].detach().numpy().astype(np.float32)
    peak = float(cam.max())
    if peak <= 0.0:
        logger.warning("degenerate zero-gradient heatmap for %s", source or "<array>")
        return HeatMap(
            data=np.zeros_like(cam),
            target_layer=layer,
            target_class=target_class,
            source_path=source,
            degenerate=True,
        )
    return HeatMap(
        data=cam / peak,
        target_layer=layer,
        target_class=target_class,
        source_path=source,
    )


def _jet_lut() -> np.ndarray:
    # fixed jet-style lookup table; byte-stable across runs and versions
    x = np.linspace(0.0, 1.0, 256)
    r = np.clip(1.5 - np.abs(4 * x - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * x - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * x - 1), 0, 1)
    return np.round(np.stack([r, g, b], axis=1) * 255).astype(np.uint8)


JET_LUT = _jet_lut()


def colormap(hm_data: np.ndarray) -> np.ndarray:
    """Map a [0, 1] heatmap to RGB uint8 through the fixed jet table."""
    idx = np.clip(np.round(hm_data * 255), 0, 255).astype(np.int64)
    return JET_LUT[idx]


def overlay(
    hm: HeatMap,
    image_path: str | os.PathLike,
    alpha: float,
    out_path: str | os.PathLike,
) -> Path:
    """Alpha-blend the colormapped heatmap over the resized source image."""
    if not (0.0 <= alpha <= 1.0):
        raise DataError(f"alpha must be in [0, 1], got {alpha}")
    h, w = hm.data.shape
    try:
        with Image.open(image_path) as img:
            src = np.asarray(img.convert("RGB").resize((w, h), Image.BILINEAR))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {image_path}: {exc}") from exc
    heat = colormap(hm.data)
    blended = np.round(
        (1.0 - alpha) * src.astype(np.float64) + alpha * heat.astype(np.float64)
    ).astype(np.uint8)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(blended).save(out_path, format="PNG")
    return out_path


def write_sidecar(
    out_path: str | os.PathLike, hm: HeatMap, prob_synthetic: float
) -> Path:
    side = Path(out_path).with_suffix(".json")
    side.write_text(
        json.dumps(
            {
                "source": hm.source_path,
                "target_class": hm.target_class,
                "prob": prob_synthetic,
                "layer": hm.target_layer,
                "degenerate": hm.degenerate,
            },
            sort_keys=True,
        )
    )
    return side
