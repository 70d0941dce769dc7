import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsgdetect.errors import DataError, ModelError
from tsgdetect.schedule import (
    NoiseSchedule,
    ddim_denoise,
    ddim_invert,
    ddim_timesteps,
    ddpm_loss,
    forward_marginal,
    forward_step,
    make_linear_schedule,
    score_from_eps,
)


def rng(seed=0):
    return np.random.default_rng(seed)


class ZeroPredictor:
    """Noise predictor stub that always predicts zero noise."""

    def __init__(self, resolution=(4, 4), channels=1, T=100):
        self.resolution = resolution
        self.channels = channels
        self.T = T
        self.calls = 0

    def predict_noise(self, batch, t):
        assert 0 <= t < self.T
        self.calls += 1
        return np.zeros_like(batch)


# ---------------------------------------------------------------- schedules


def test_single_step_schedule():
    s = make_linear_schedule(1, 0.5, 0.5)
    assert s.betas.tolist() == [0.5]
    assert s.alpha_bars.tolist() == [0.5]


def test_two_step_schedule_by_hand():
    s = make_linear_schedule(2, 0.1, 0.3)
    np.testing.assert_allclose(s.alpha_bars, [0.9, 0.9 * 0.7], rtol=0, atol=1e-15)


def test_default_schedule_matches_direct_product():
    s = make_linear_schedule(1000, 1e-4, 0.02)
    # independent oracle: accumulate the 1000-term product one factor at a time
    prod = 1.0
    direct = []
    for b in np.linspace(1e-4, 0.02, 1000):
        prod *= 1.0 - b
        direct.append(prod)
    np.testing.assert_allclose(s.alpha_bars, direct, rtol=1e-12)
    assert s.alpha_bars[999] < 1e-4
    assert np.all(np.diff(s.alpha_bars) < 0)


def test_schedule_invariants_hold():
    s = make_linear_schedule(100, 1e-4, 0.02)
    assert np.all(s.alpha_bars > 0)
    assert np.all(s.alpha_bars <= s.alphas[0])
    assert s.alphas[0] < 1
    recon = s.alpha_bars[:-1] * s.alphas[1:]
    np.testing.assert_allclose(recon, s.alpha_bars[1:], rtol=0, atol=1e-12)


@pytest.mark.parametrize(
    "args",
    [
        (0, 0.1, 0.2),
        (-3, 0.1, 0.2),
        (10, 0.0, 0.2),
        (10, 0.1, 1.0),
        (10, 0.3, 0.1),
        (10, -0.1, 0.2),
    ],
)
def test_bad_schedule_params_rejected(args):
    with pytest.raises(DataError):
        make_linear_schedule(*args)


def test_schedule_params_round_trip():
    s = make_linear_schedule(50, 2e-4, 0.05)
    s2 = NoiseSchedule.from_params(s.to_params())
    assert np.array_equal(s.betas, s2.betas)
    assert np.array_equal(s.alpha_bars, s2.alpha_bars)


# ------------------------------------------------------------ forward noising


def test_marginal_zero_noise_is_pure_scaling():
    s = make_linear_schedule(10, 0.01, 0.2)
    x0 = rng().uniform(-1, 1, (5, 5, 3)).astype(np.float32)
    out = forward_marginal(x0, 4, np.zeros_like(x0), s)
    np.testing.assert_array_equal(out, np.float32(math.sqrt(s.alpha_bars[4])) * x0)


def test_marginal_zero_signal_is_pure_noise():
    s = make_linear_schedule(10, 0.01, 0.2)
    e = rng(1).standard_normal((5, 5, 3)).astype(np.float32)
    out = forward_marginal(np.zeros_like(e), 7, e, s)
    np.testing.assert_array_equal(out, np.float32(math.sqrt(1 - s.alpha_bars[7])) * e)


def test_marginal_validates_inputs():
    s = make_linear_schedule(10, 0.01, 0.2)
    x = np.zeros((4, 4, 3), dtype=np.float32)
    with pytest.raises(DataError):
        forward_marginal(x, 10, np.zeros_like(x), s)
    with pytest.raises(DataError):
        forward_marginal(x, -1, np.zeros_like(x), s)
    with pytest.raises(DataError):
        forward_marginal(x, 3, np.zeros((4, 5, 3), dtype=np.float32), s)


def test_step_zero_noise_is_ratio_scaling():
    s = make_linear_schedule(10, 0.01, 0.2)
    x = rng(2).uniform(-1, 1, (3, 3, 1)).astype(np.float32)
    out = forward_step(x, 5, np.zeros_like(x), s)
    ratio = s.alpha_bars[5] / s.alpha_bars[4]
    np.testing.assert_array_equal(out, np.float32(math.sqrt(ratio)) * x)


def test_step_with_vanishing_beta_approaches_identity():
    # beta exactly 0 is outside the schedule domain; a vanishing beta must
    # make the step an identity up to float32 resolution.
    s = NoiseSchedule(T=3, betas=np.array([0.1, 1e-12, 0.1]))
    x = rng(3).uniform(-1, 1, (4, 4, 3)).astype(np.float32)
    e = rng(4).standard_normal((4, 4, 3)).astype(np.float32)
    out = forward_step(x, 1, e, s)
    np.testing.assert_allclose(out, x, atol=1e-5)


def test_step_rejects_t_zero_and_mismatch():
    s = make_linear_schedule(10, 0.01, 0.2)
    x = np.zeros((4, 4, 3), dtype=np.float32)
    with pytest.raises(DataError):
        forward_step(x, 0, np.zeros_like(x), s)
    with pytest.raises(DataError):
        forward_step(x, 3, np.zeros((2, 2, 3), dtype=np.float32), s)


def test_composition_matches_marginal_analytically_and_monte_carlo():
    # Random T=50 schedule: stepwise composition must reproduce the one-jump
    # marginal's mean and variance, first in closed form then empirically.
    r = rng(1234)
    betas = r.uniform(0.001, 0.08, size=50)
    s = NoiseSchedule(T=50, betas=betas)

    # closed-form coefficient check (float64, 1e-12)
    mean_coeff = math.sqrt(s.alpha_bars[0])
    var = 1.0 - s.alpha_bars[0]
    for t in range(1, 50):
        ratio = s.alpha_bars[t] / s.alpha_bars[t - 1]
        mean_coeff *= math.sqrt(ratio)
        var = ratio * var + (1.0 - ratio)
    assert abs(mean_coeff - math.sqrt(s.alpha_bars[49])) < 1e-12
    assert abs(var - (1.0 - s.alpha_bars[49])) < 1e-12

    # Monte-Carlo composition over 1e5 draws, per-pixel, 4 standard errors
    n = 100_000
    x0 = r.uniform(-1, 1, (4, 4, 1)).astype(np.float32)
    x0b = np.broadcast_to(x0, (n, 4, 4, 1)).astype(np.float32)
    x = forward_marginal(x0b, 0, r.standard_normal(x0b.shape).astype(np.float32), s)
    for t in range(1, 50):
        x = forward_step(x, t, r.standard_normal(x0b.shape).astype(np.float32), s)

    target_mean = np.float64(math.sqrt(s.alpha_bars[49])) * x0.astype(np.float64)
    target_var = 1.0 - s.alpha_bars[49]
    emp_mean = x.mean(axis=0, dtype=np.float64)
    emp_var = x.var(axis=0, ddof=1, dtype=np.float64)
    se_mean = math.sqrt(target_var / n)
    se_var = target_var * math.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(emp_mean - target_mean) < 4 * se_mean)
    assert np.all(np.abs(emp_var - target_var) < 4 * se_var)


@given(
    lam=st.floats(-3, 3, allow_nan=False),
    mu=st.floats(-3, 3, allow_nan=False),
    t=st.integers(0, 9),
    seed=st.integers(0, 2**31 - 1),
)
@settings(max_examples=40, deadline=None)
def test_marginal_is_jointly_linear(lam, mu, t, seed):
    s = make_linear_schedule(10, 0.01, 0.2)
    r = rng(seed)
    a = r.uniform(-1, 1, (3, 3, 2)).astype(np.float64)
    b = r.uniform(-1, 1, (3, 3, 2)).astype(np.float64)
    ea = r.standard_normal((3, 3, 2))
    eb = r.standard_normal((3, 3, 2))
    combined = forward_marginal(lam * a + mu * b, t, lam * ea + mu * eb, s)
    separate = lam * forward_marginal(a, t, ea, s) + mu * forward_marginal(b, t, eb, s)
    np.testing.assert_allclose(combined, separate, rtol=1e-10, atol=1e-12)


# ----------------------------------------------------------------- ddpm loss


def test_loss_zero_iff_identical():
    x = rng(5).standard_normal((4, 4, 3)).astype(np.float32)
    assert ddpm_loss(x, x) == 0.0
    assert ddpm_loss(x, x + 0.1) > 0.0


def test_loss_of_unit_offset_is_one():
    z = np.zeros((6, 6, 3), dtype=np.float32)
    assert ddpm_loss(z, np.ones_like(z)) == pytest.approx(1.0)


def test_loss_matches_elementwise_sum():
    r = rng(6)
    a = r.standard_normal((5, 7, 3))
    b = r.standard_normal((5, 7, 3))
    total = 0.0
    for i in range(5):
        for j in range(7):
            for c in range(3):
                total += (a[i, j, c] - b[i, j, c]) ** 2
    assert ddpm_loss(a, b) == pytest.approx(total / (5 * 7 * 3), rel=1e-12)


def test_loss_shape_mismatch():
    with pytest.raises(DataError):
        ddpm_loss(np.zeros((2, 2, 1)), np.zeros((2, 2, 3)))


# ------------------------------------------------------------------- scores


def test_score_of_zero_noise_is_zero():
    s = make_linear_schedule(10, 0.01, 0.2)
    z = np.zeros((3, 3, 3), dtype=np.float32)
    np.testing.assert_array_equal(score_from_eps(z, 4, s), z)


def test_score_quarter_variance_case():
    # alpha_bar = 0.75 makes the scale -1/sqrt(0.25) = -2
    s = NoiseSchedule(T=1, betas=np.array([0.25]))
    out = score_from_eps(np.ones((2, 2, 1), dtype=np.float32), 0, s)
    np.testing.assert_allclose(out, -2.0, rtol=1e-6)


def test_score_matches_elementwise_division():
    s = make_linear_schedule(20, 0.01, 0.1)
    e = rng(7).standard_normal((4, 4, 3))
    out = score_from_eps(e, 13, s)
    scale = math.sqrt(1 - s.alpha_bars[13])
    for idx in np.ndindex(e.shape):
        assert out[idx] == pytest.approx(-e[idx] / scale, rel=1e-12)


@given(lam=st.floats(-5, 5, allow_nan=False), seed=st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_score_linearity(lam, seed):
    s = make_linear_schedule(10, 0.01, 0.2)
    e = rng(seed).standard_normal((3, 3, 1))
    np.testing.assert_allclose(
        score_from_eps(lam * e, 2, s),
        lam * score_from_eps(e, 2, s),
        rtol=1e-9,
        atol=1e-12,
    )


def test_score_degenerate_alpha_bar_rejected():
    s = NoiseSchedule(T=2, betas=np.array([1e-13, 1e-13]))
    with pytest.raises(DataError):
        score_from_eps(np.ones((2, 2, 1), dtype=np.float32), 0, s)


# --------------------------------------------------------------------- DDIM


def test_ddim_timesteps_spacing():
    assert ddim_timesteps(1000, 20) == [50 * i for i in range(20)]
    assert ddim_timesteps(100, 20) == [5 * i for i in range(20)]
    assert ddim_timesteps(10, 10) == list(range(10))
    assert ddim_timesteps(10, 1) == [0]


def test_ddim_timesteps_rejected():
    with pytest.raises(DataError):
        ddim_timesteps(10, 11)
    with pytest.raises(DataError):
        ddim_timesteps(10, 0)


@pytest.mark.parametrize("k", [1, 3, 7, 20])
def test_zero_predictor_round_trip_is_exact(k):
    # The invert/denoise pair is a mathematically exact inverse under the
    # all-zeros predictor. The float64 route verifies that to accumulation
    # rounding; the float32 route loses one rounding at the latent handoff,
    # so it holds to a couple of ulps.
    s = make_linear_schedule(100, 1e-4, 0.02)
    p = ZeroPredictor(resolution=(4, 4), T=100)
    x64 = rng(8).uniform(-1, 1, (4, 4, 3))
    restored64 = ddim_denoise(ddim_invert(x64, k, p, s), k, p, s)
    assert restored64.dtype == np.float64
    np.testing.assert_allclose(restored64, x64, rtol=1e-12, atol=0)

    x32 = x64.astype(np.float32)
    restored32 = ddim_denoise(ddim_invert(x32, k, p, s), k, p, s)
    assert restored32.dtype == np.float32
    np.testing.assert_allclose(restored32, x32, rtol=3e-7, atol=0)


def test_zero_predictor_invert_scales_by_terminal_alpha_bar():
    s = make_linear_schedule(100, 1e-4, 0.02)
    p = ZeroPredictor(resolution=(4, 4), T=100)
    x0 = rng(9).uniform(-1, 1, (4, 4, 3)).astype(np.float32)
    out = ddim_invert(x0, 5, p, s)
    tau_last = ddim_timesteps(100, 5)[-1]
    np.testing.assert_allclose(
        out, math.sqrt(s.alpha_bars[tau_last]) * x0, rtol=1e-6, atol=1e-7
    )


@pytest.mark.parametrize("op", [ddim_invert, ddim_denoise])
@pytest.mark.parametrize("k", [1, 4, 9])
def test_ddim_calls_predictor_exactly_k_times(op, k):
    s = make_linear_schedule(50, 1e-3, 0.05)
    p = ZeroPredictor(resolution=(4, 4), T=50)
    x = rng(10).uniform(-1, 1, (4, 4, 3)).astype(np.float32)
    op(x, k, p, s)
    assert p.calls == k


def test_ddim_rejects_oversized_k_and_resolution_mismatch():
    s = make_linear_schedule(10, 1e-3, 0.05)
    p = ZeroPredictor(resolution=(4, 4), T=10)
    x = np.zeros((4, 4, 3), dtype=np.float32)
    with pytest.raises(DataError):
        ddim_invert(x, 11, p, s)
    with pytest.raises(ModelError):
        ddim_invert(np.zeros((8, 8, 3), dtype=np.float32), 2, p, s)


def test_ddim_batch_matches_per_image():
    s = make_linear_schedule(20, 1e-3, 0.05)

    class ScaledEcho:
        resolution = (4, 4)
        channels = 3
        T = 20

        def predict_noise(self, batch, t):
            return 0.1 * batch

    p = ScaledEcho()
    imgs = rng(11).uniform(-1, 1, (3, 4, 4, 3)).astype(np.float32)
    batched = ddim_invert(imgs, 4, p, s)
    singles = np.stack([ddim_invert(imgs[i], 4, p, s) for i in range(3)])
    np.testing.assert_array_equal(batched, singles)
