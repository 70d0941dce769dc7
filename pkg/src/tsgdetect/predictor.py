"""Noise-prediction networks behind a uniform handle.

A :class:`NoisePredictorHandle` wraps a torch U-Net together with the
resolution/T metadata and the noise schedule it was trained against. Handles
are immutable after construction; ``predict_noise`` is a pure function of
(weights, input, t) and is safe to call concurrently.

Checkpoint file format: one UTF-8 JSON metadata line (normative schema:
resolution, T, channels, source, conditional, tag, schedule, and the network
config for toy models), a newline, then the torch-serialized state dict.
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError, ModelError
from .schedule import NoiseSchedule, ddim_denoise, forward_marginal

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = "tsgpredictor/1"


@dataclass(frozen=True)
class ToyUNetConfig:
    """Shape of the desk-scale noise-prediction U-Net."""

    base_channels: int = 16
    depth: int = 2
    time_embedding_dim: int = 64
    resolution: tuple[int, int] = (32, 32)
    T: int = 100

    def __post_init__(self):
        if min(self.base_channels, self.depth, self.time_embedding_dim, self.T) < 1:
            raise ModelError("all toy U-Net dimensions must be positive")
        h, w = self.resolution
        if h < 1 or w < 1:
            raise ModelError("resolution must be positive")
        if h % (1 << self.depth) or w % (1 << self.depth):
            raise ModelError(
                f"resolution {self.resolution} not divisible by 2^{self.depth}"
            )

    def to_dict(self) -> dict:
        return {
            "base_channels": self.base_channels,
            "depth": self.depth,
            "time_embedding_dim": self.time_embedding_dim,
            "resolution": list(self.resolution),
            "T": self.T,
        }

    @staticmethod
    def from_dict(d: dict) -> "ToyUNetConfig":
        return ToyUNetConfig(
            base_channels=int(d["base_channels"]),
            depth=int(d["depth"]),
            time_embedding_dim=int(d["time_embedding_dim"]),
            resolution=tuple(d["resolution"]),
            T=int(d["T"]),
        )


def _sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half
    )
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        groups = math.gcd(8, cin)
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(math.gcd(8, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class ToyUNet(nn.Module):
    """Small residual U-Net with sinusoidal time embedding, no attention."""

    def __init__(self, cfg: ToyUNetConfig, channels: int = 3):
        super().__init__()
        self.cfg = cfg
        self.channels = channels
        base = cfg.base_channels
        temb = cfg.time_embedding_dim
        self.temb_mlp = nn.Sequential(
            nn.Linear(temb, temb * 2), nn.SiLU(), nn.Linear(temb * 2, temb * 2)
        )
        widths = [base * (1 << i) for i in range(cfg.depth + 1)]
        self.stem = nn.Conv2d(channels, base, 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        for i in range(cfg.depth):
            self.down_blocks.append(_ResBlock(widths[i], widths[i], temb * 2))
            self.downsamplers.append(nn.Conv2d(widths[i], widths[i + 1], 3, 2, 1))
        self.mid = _ResBlock(widths[-1], widths[-1], temb * 2)
        self.up_blocks = nn.ModuleList()
        self.up_convs = nn.ModuleList()
        for i in reversed(range(cfg.depth)):
            self.up_convs.append(nn.Conv2d(widths[i + 1], widths[i], 3, padding=1))
            self.up_blocks.append(_ResBlock(widths[i] * 2, widths[i], temb * 2))
        self.out_norm = nn.GroupNorm(math.gcd(8, base), base)
        self.out_conv = nn.Conv2d(base, channels, 3, padding=1)

    def forward(self, x, t):
        temb = self.temb_mlp(_sinusoidal_embedding(t, self.cfg.time_embedding_dim))
        h = self.stem(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downsamplers):
            h = block(h, temb)
            skips.append(h)
            h = down(h)
        h = self.mid(h, temb)
        for conv, block in zip(self.up_convs, self.up_blocks):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = conv(h)
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
        return self.out_conv(F.silu(self.out_norm(h)))


class NoisePredictorHandle:
    """Immutable handle over a trained noise-prediction network."""

    def __init__(
        self,
        model: nn.Module,
        resolution: tuple[int, int],
        channels: int,
        T: int,
        source: str,
        tag: str,
        schedule: NoiseSchedule,
        net_config: dict | None = None,
        conditional: bool = False,
    ):
        if conditional:
            raise ModelError("conditional models are not supported")
        if source not in ("pretrained_checkpoint", "toy_trained"):
            raise ModelError(f"unknown predictor source {source!r}")
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self._model = model
        self.resolution = tuple(resolution)
        self.channels = int(channels)
        self.T = int(T)
        self.conditional = False
        self.source = source
        self.tag = tag
        self.schedule = schedule
        self.net_config = net_config
        self.loss_history: list[float] = []

    def predict_noise(self, batch: np.ndarray, t: int) -> np.ndarray:
        """Estimate the noise in a float32 (N, H, W, C) batch at timestep t."""
        if batch.ndim != 4:
            raise DataError(f"expected (N, H, W, C) batch, got shape {batch.shape}")
        if batch.shape[1:3] != self.resolution:
            raise ModelError(
                f"input resolution {batch.shape[1:3]} does not match "
                f"predictor resolution {self.resolution}"
            )
        if not (0 <= t < self.T):
            raise DataError(f"timestep {t} out of range [0, {self.T})")
        x = torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32))
        x = x.permute(0, 3, 1, 2)
        ts = torch.full((x.shape[0],), int(t), dtype=torch.long)
        with torch.no_grad():
            out = self._model(x, ts)
        # learned-variance checkpoints emit 2C channels; keep the noise half
        if out.shape[1] == 2 * self.channels:
            out = out[:, : self.channels]
        elif out.shape[1] != self.channels:
            raise ModelError(
                f"predictor produced {out.shape[1]} channels, expected "
                f"{self.channels} or {2 * self.channels}"
            )
        return out.permute(0, 2, 3, 1).contiguous().numpy()

    def metadata(self) -> dict:
        return {
            "schema": CHECKPOINT_SCHEMA,
            "resolution": list(self.resolution),
            "T": self.T,
            "channels": self.channels,
            "conditional": self.conditional,
            "source": self.source,
            "tag": self.tag,
            "schedule": self.schedule.to_params(),
            "net_config": self.net_config,
        }

    def save(self, path: str | os.PathLike):
        payload = io.BytesIO()
        torch.save(self._model.state_dict(), payload)
        with open(path, "wb") as fh:
            fh.write(json.dumps(self.metadata()).encode("utf-8"))
            fh.write(b"\n")
            fh.write(payload.getvalue())


class CallCounter:
    """Wrap a predictor to count per-image evaluations and forward passes."""

    def __init__(self, inner):
        self._inner = inner
        self.resolution = inner.resolution
        self.channels = inner.channels
        self.T = inner.T
        self.calls = 0
        self.forward_passes = 0

    def predict_noise(self, batch: np.ndarray, t: int) -> np.ndarray:
        out = self._inner.predict_noise(batch, t)
        self.forward_passes += 1
        self.calls += batch.shape[0]
        return out


def load_pretrained(
    path: str | os.PathLike, expected: dict | None = None
) -> NoisePredictorHandle:
    """Load a noise-predictor checkpoint and validate it against ``expected``.

    ``expected`` may pin any of resolution, T, channels; mismatches are
    rejected. Conditional checkpoints are rejected outright.
    """
    if not os.path.exists(path):
        raise ModelError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        header = fh.readline()
        blob = fh.read()
    try:
        meta = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelError(f"unreadable checkpoint metadata in {path}: {exc}") from exc
    if meta.get("schema") != CHECKPOINT_SCHEMA:
        raise ModelError(f"{path} is not a {CHECKPOINT_SCHEMA} checkpoint")
    if meta.get("conditional"):
        raise ModelError("conditional-model checkpoint rejected")
    if expected:
        for key in ("resolution", "T", "channels"):
            if key in expected:
                want, got = expected[key], meta[key]
                if list(np.atleast_1d(want)) != list(np.atleast_1d(got)):
                    raise ModelError(
                        f"checkpoint metadata mismatch for {key}: "
                        f"expected {want}, found {got}"
                    )
    if meta.get("net_config") is None:
        raise ModelError(
            "checkpoint does not describe its network; external-architecture "
            "weights must be converted to the toy format first"
        )
    cfg = ToyUNetConfig.from_dict(meta["net_config"])
    model = ToyUNet(cfg, channels=meta["channels"])
    try:
        state = torch.load(io.BytesIO(blob), map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    except Exception as exc:
        raise ModelError(f"failed to load weights from {path}: {exc}") from exc
    return NoisePredictorHandle(
        model,
        resolution=tuple(meta["resolution"]),
        channels=meta["channels"],
        T=meta["T"],
        source=meta["source"],
        tag=meta["tag"],
        schedule=NoiseSchedule.from_params(meta["schedule"]),
        net_config=meta["net_config"],
    )


def _load_training_images(manifest, resolution: tuple[int, int]) -> np.ndarray:
    from .features import preprocess

    paths = [e.path for e in manifest.entries if e.label == "real" and e.split == "train"]
    if not paths:
        raise DataError("manifest has no real training images")
    return np.stack([preprocess(p, target_resolution=resolution) for p in paths])


def train_toy_ddpm(
    data,
    cfg: ToyUNetConfig,
    sched: NoiseSchedule,
    steps: int,
    seed: int,
    batch_size: int = 16,
    learning_rate: float = 2e-4,
    log_every: int = 200,
) -> NoisePredictorHandle:
    """Train a toy noise predictor on the real/train split of a manifest.

    Standard denoising objective: uniform random timestep and fresh Gaussian
    noise per sample, MSE between true and predicted noise. Fixed seed gives
    a reproducible loss curve on a fixed device.
    """
    if steps < 1:
        raise DataError(f"steps must be >= 1, got {steps}")
    if cfg.T != sched.T:
        raise ModelError(f"config T={cfg.T} does not match schedule T={sched.T}")
    images = _load_training_images(data, cfg.resolution)
    n = len(images)
    torch.manual_seed(seed)
    model = ToyUNet(cfg, channels=3)
    opt = torch.optim.Adam(model.parameters(), lr=learning_rate)

    sqrt_ab = torch.from_numpy(np.sqrt(sched.alpha_bars)).float()
    sqrt_1mab = torch.from_numpy(np.sqrt(1.0 - sched.alpha_bars)).float()
    data_t = torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()

    model.train()
    losses: list[float] = []
    t_start = time.time()
    for step in range(steps):
        idx = torch.randint(0, n, (batch_size,))
        x0 = data_t[idx]
        t = torch.randint(0, sched.T, (batch_size,))
        eps = torch.randn_like(x0)
        x_t = sqrt_ab[t, None, None, None] * x0 + sqrt_1mab[t, None, None, None] * eps
        loss = F.mse_loss(model(x_t, t), eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log_every and (step % log_every == 0 or step == steps - 1):
            logger.info(
                "toy ddpm step %d/%d loss %.5f (%.1fs)",
                step,
                steps,
                losses[-1],
                time.time() - t_start,
            )
    handle = NoisePredictorHandle(
        model,
        resolution=cfg.resolution,
        channels=3,
        T=sched.T,
        source="toy_trained",
        tag=f"toy_{cfg.resolution[0]}x{cfg.resolution[1]}_T{sched.T}_s{seed}",
        schedule=sched,
        net_config=cfg.to_dict(),
    )
    handle.loss_history = losses
    return handle


def generate_samples(
    h: NoisePredictorHandle,
    n: int,
    k: int,
    seed: int,
    sched: NoiseSchedule,
    batch_size: int = 64,
) -> np.ndarray:
    """Draw n images by deterministic DDIM from seeded Gaussian noise.

    Returns a float32 (n, H, W, C) batch clipped to [-1, 1].
    """
    if n < 1:
        raise DataError(f"sample count must be >= 1, got {n}")
    if k < 1:
        raise DataError(f"DDIM step count must be >= 1, got {k}")
    gen = torch.Generator().manual_seed(seed)
    height, width = h.resolution
    noise = torch.randn((n, height, width, h.channels), generator=gen).numpy()
    out = np.empty_like(noise, dtype=np.float32)
    for lo in range(0, n, batch_size):
        chunk = noise[lo : lo + batch_size].astype(np.float32)
        out[lo : lo + batch_size] = ddim_denoise(chunk, k, h, sched)
    return np.clip(out, -1.0, 1.0)


def zeros_like_predictor(resolution: tuple[int, int], channels: int, T: int):
    """Baseline predictor that always answers zero noise (untrained floor)."""

    class _Zeros:
        def __init__(self):
            self.resolution = tuple(resolution)
            self.channels = channels
            self.T = T

        def predict_noise(self, batch, t):
            return np.zeros_like(batch)

    return _Zeros()
