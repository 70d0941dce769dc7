"""Discrete-time diffusion schedule math.

Conventions used throughout the package:

- Timesteps are discrete indices t in {0, ..., T-1}. The clean image sits
  *below* index 0 at a virtual signal level alpha_bar = 1, so the forward
  marginal at index t is

      x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps

  and the stepwise kernel from level t-1 to t scales by the ratio
  alpha_bar[t] / alpha_bar[t-1].

- Schedule coefficients (betas, alphas, alpha_bars) are float64; image
  tensors are float32 arrays of shape (H, W, C) or batched (N, H, W, C).

- Deterministic DDIM (eta = 0) runs over k evenly spaced timesteps
  round(i*T/k), i = 0..k-1. The trajectory is kept in float64 and the
  output matches the input dtype, so a float64 round trip under the
  all-zeros predictor inverts to within float64 rounding and a float32
  round trip to within a couple of ulps.

Reverse-process variances (learned or fixed) are deliberately absent:
everything here is deterministic, and stochastic ancestral sampling is out
of scope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .errors import DataError, ModelError

# Per-step tolerance for the cumulative-product recurrence check.
_RECURRENCE_TOL = 1e-12


class NoisePredictor(Protocol):
    """Structural interface for noise-prediction networks.

    ``predict_noise`` maps a float32 batch (N, H, W, C) in model space and a
    timestep index to a same-shaped noise estimate.
    """

    resolution: tuple[int, int]
    channels: int
    T: int

    def predict_noise(self, batch: np.ndarray, t: int) -> np.ndarray: ...


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete-time diffusion hyperparameters and derived coefficients."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.T < 1:
            raise DataError(f"schedule needs T >= 1, got {self.T}")
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.shape != (self.T,):
            raise DataError(f"betas must have shape ({self.T},), got {betas.shape}")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise DataError("betas must lie strictly inside (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        if np.any(np.diff(alpha_bars) >= 0.0):
            raise DataError("alpha_bars must be strictly decreasing")
        # Recurrence alpha_bars[t] = alpha_bars[t-1] * alphas[t] holds by
        # construction; guard against a pathological cumprod anyway.
        recon = alpha_bars[:-1] * alphas[1:]
        if np.any(np.abs(recon - alpha_bars[1:]) > _RECURRENCE_TOL):
            raise DataError("alpha_bars violate the cumulative-product recurrence")

    def to_params(self) -> dict:
        """JSON-serializable schedule description (exact float round-trip)."""
        return {"T": self.T, "betas": [float(b) for b in self.betas]}

    @staticmethod
    def from_params(params: dict) -> "NoiseSchedule":
        return NoiseSchedule(T=int(params["T"]), betas=np.asarray(params["betas"]))


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linearly interpolated betas, endpoints inclusive."""
    if T < 1:
        raise DataError(f"T must be positive, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise DataError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(T=T, betas=betas)


DEFAULT_SCHEDULE_PARAMS = {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02}
TOY_SCHEDULE_PARAMS = {"T": 100, "beta_start": 1e-4, "beta_end": 0.02}


def default_schedule() -> NoiseSchedule:
    return make_linear_schedule(**DEFAULT_SCHEDULE_PARAMS)


def toy_schedule() -> NoiseSchedule:
    return make_linear_schedule(**TOY_SCHEDULE_PARAMS)


def _check_t(t: int, T: int):
    if not (0 <= t < T):
        raise DataError(f"timestep {t} out of range [0, {T})")


def _check_same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise DataError(f"shape mismatch: {a.shape} vs {b.shape}")


def forward_marginal(
    x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule
) -> np.ndarray:
    """Noise the clean image to level t in a single jump."""
    _check_t(t, sched.T)
    _check_same_shape(x0, eps)
    ab = sched.alpha_bars[t]
    dtype = x0.dtype
    return (dtype.type(math.sqrt(ab)) * x0 + dtype.type(math.sqrt(1.0 - ab)) * eps)


def forward_step(
    x_prev: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule
) -> np.ndarray:
    """One stepwise noising kernel from level t-1 to level t."""
    if t < 1:
        raise DataError(f"forward_step needs t >= 1 (level {t} has no predecessor)")
    _check_t(t, sched.T)
    _check_same_shape(x_prev, eps)
    ratio = sched.alpha_bars[t] / sched.alpha_bars[t - 1]
    dtype = x_prev.dtype
    return (
        dtype.type(math.sqrt(ratio)) * x_prev
        + dtype.type(math.sqrt(1.0 - ratio)) * eps
    )


def ddpm_loss(eps_true: np.ndarray, eps_pred: np.ndarray) -> float:
    """Mean squared error between true and predicted noise."""
    _check_same_shape(eps_true, eps_pred)
    diff = eps_true.astype(np.float64) - eps_pred.astype(np.float64)
    return float(np.mean(diff * diff))


def score_from_eps(eps: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Convert predicted noise into the score of the noised marginal,
    score = -eps / sqrt(1 - alpha_bar[t])."""
    _check_t(t, sched.T)
    one_minus = 1.0 - sched.alpha_bars[t]
    if one_minus <= _RECURRENCE_TOL:
        raise DataError(
            f"degenerate timestep {t}: alpha_bar numerically 1, score undefined"
        )
    return (-eps / eps.dtype.type(math.sqrt(one_minus))).astype(eps.dtype)


def ddim_timesteps(T: int, k: int) -> list[int]:
    """Evenly spaced subsample round(i*T/k), i = 0..k-1, strictly increasing."""
    if k < 1:
        raise DataError(f"DDIM step count must be >= 1, got {k}")
    if k > T:
        raise DataError(f"DDIM step count {k} exceeds schedule length {T}")
    taus = [int(round(i * T / k)) for i in range(k)]
    if any(b <= a for a, b in zip(taus, taus[1:])) or taus[-1] >= T:
        raise DataError(f"degenerate DDIM subsampling for T={T}, k={k}")
    return taus


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DataError(f"expected (H, W, C) or (N, H, W, C) array, got shape {x.shape}")


def _check_predictor_resolution(x: np.ndarray, predictor: NoisePredictor):
    h, w = predictor.resolution
    if x.shape[1:3] != (h, w):
        raise ModelError(
            f"predictor resolution {(h, w)} does not match input {x.shape[1:3]}"
        )


def _ddim_levels(sched: NoiseSchedule, k: int) -> tuple[list[int], np.ndarray]:
    """Timesteps plus the alpha_bar ladder including the virtual clean level."""
    taus = ddim_timesteps(sched.T, k)
    abars = np.concatenate([[1.0], sched.alpha_bars[taus]])
    return taus, abars


def _ddim_transition(
    x: np.ndarray, eps: np.ndarray, a_src: float, a_dst: float
) -> np.ndarray:
    x0_pred = (x - math.sqrt(1.0 - a_src) * eps) / math.sqrt(a_src)
    return math.sqrt(a_dst) * x0_pred + math.sqrt(1.0 - a_dst) * eps


def ddim_invert(
    x0: np.ndarray, k: int, predictor: NoisePredictor, sched: NoiseSchedule
) -> np.ndarray:
    """Deterministically map an image toward noise over k DDIM steps.

    Performs exactly k predictor evaluations; transition between levels
    l-1 and l evaluates the predictor at that rung's timestep, mirroring
    ddim_denoise so the two are mutual inverses under a fixed predictor
    output.
    """
    batch, squeeze = _as_batch(x0)
    _check_predictor_resolution(batch, predictor)
    taus, abars = _ddim_levels(sched, k)
    x = batch.astype(np.float64)
    for i, tau in enumerate(taus):
        eps = predictor.predict_noise(x.astype(np.float32), tau).astype(np.float64)
        x = _ddim_transition(x, eps, abars[i], abars[i + 1])
    out = x.astype(batch.dtype, copy=False)
    return out[0] if squeeze else out


def ddim_denoise(
    x_k: np.ndarray, k: int, predictor: NoisePredictor, sched: NoiseSchedule
) -> np.ndarray:
    """Reverse of ddim_invert: k deterministic denoising steps back to clean."""
    batch, squeeze = _as_batch(x_k)
    _check_predictor_resolution(batch, predictor)
    taus, abars = _ddim_levels(sched, k)
    x = batch.astype(np.float64)
    for i in range(k - 1, -1, -1):
        eps = predictor.predict_noise(x.astype(np.float32), taus[i]).astype(np.float64)
        x = _ddim_transition(x, eps, abars[i + 1], abars[i])
    out = x.astype(batch.dtype, copy=False)
    return out[0] if squeeze else out
