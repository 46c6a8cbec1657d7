import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

import oracles
from refvid import autodiff as ad
from refvid.autodiff import Tensor
from refvid.diffusion import (
    Schedule, build_schedule, ddpm_sample, diffusion_loss, forward_noise, forward_noise_batch, guided,
    sample_timesteps,
)
from refvid.errors import ConfigError, DimensionError, NumericError

FIXTURES = Path(__file__).parent / "fixtures"


def test_single_step_schedule():
    s = build_schedule(1, 0.1, 0.1)
    assert s.alpha_bar.tolist() == [0.9]


def test_alpha_bar_matches_loop_oracle():
    s = build_schedule(1000, 1e-4, 2e-2)
    betas = oracles.linspace(1e-4, 2e-2, 1000)
    assert np.max(np.abs(s.beta - betas)) < 1e-15
    assert np.max(np.abs(s.alpha_bar - oracles.alpha_bar(betas))) < 1e-12


@settings(max_examples=50)
@given(st.integers(1, 300), st.floats(1e-5, 0.5), st.floats(0.0, 1.0))
def test_alpha_bar_strictly_decreasing(T, lo, frac):
    hi = lo + frac * (0.99 - lo)
    s = build_schedule(T, lo, hi)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.alpha_bar > 0) & (s.alpha_bar <= 1))


@pytest.mark.parametrize("args", [(0, 0.1, 0.2), (10, 0.0, 0.1), (10, 0.3, 0.2), (10, 0.1, 1.0)])
def test_bad_schedule_bounds(args):
    with pytest.raises(ConfigError):
        build_schedule(*args)


def test_schedule_round_trip():
    s = build_schedule(20, 1e-3, 0.2)
    r = Schedule.from_dict(s.to_dict())
    assert np.array_equal(r.alpha_bar, s.alpha_bar) and r.T_diff == 20


def test_forward_noise_branches():
    s = build_schedule(10, 1e-3, 0.2)
    rng = np.random.default_rng(0)
    x0, eps = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    ab = s.alpha_bar[6]
    assert np.array_equal(forward_noise(x0, np.zeros_like(x0), 7, s), np.sqrt(ab) * x0)
    assert np.array_equal(forward_noise(np.zeros_like(x0), eps, 7, s), np.sqrt(1 - ab) * eps)
    expect = [[math.sqrt(ab) * a + math.sqrt(1 - ab) * e for a, e in zip(ra, re)] for ra, re in zip(x0, eps)]
    assert np.max(np.abs(forward_noise(x0, eps, 7, s) - expect)) < 1e-12


def test_forward_noise_errors():
    s = build_schedule(10, 1e-3, 0.2)
    with pytest.raises(ConfigError):
        forward_noise(np.zeros(2), np.zeros(2), 0, s)
    with pytest.raises(ConfigError):
        forward_noise(np.zeros(2), np.zeros(2), 11, s)
    with pytest.raises(DimensionError):
        forward_noise(np.zeros(2), np.zeros(3), 1, s)


def test_forward_noise_batch_per_element_t():
    s = build_schedule(10, 1e-3, 0.2)
    rng = np.random.default_rng(1)
    x0, eps = rng.standard_normal((3, 2, 2)), rng.standard_normal((3, 2, 2))
    t = [1, 5, 10]
    out = forward_noise_batch(x0, eps, t, s)
    for i, ti in enumerate(t):
        assert np.array_equal(out[i], forward_noise(x0[i], eps[i], ti, s))


def test_forward_noise_preserves_variance():
    s = build_schedule(50, 2e-3, 0.4)
    rng = np.random.default_rng(2)
    x0, eps = rng.standard_normal(10_000), rng.standard_normal(10_000)
    for t in range(1, 51):
        assert abs(forward_noise(x0, eps, t, s).var() - 1.0) < 0.05


def test_diffusion_loss_values():
    rng = np.random.default_rng(3)
    eps = rng.standard_normal((2, 3, 4))
    assert diffusion_loss(Tensor(eps), eps).item() == 0.0
    assert diffusion_loss(Tensor(eps + 1.0), eps).item() == 1.0
    for _ in range(20):
        a, b = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
        assert abs(diffusion_loss(Tensor(a), b).item() - oracles.mse_all(a.tolist(), b.tolist())) < 1e-12
    with pytest.raises(DimensionError):
        diffusion_loss(Tensor(np.zeros(3)), np.zeros(4))


@settings(max_examples=40)
@given(st.integers(0, 10_000))
def test_diffusion_loss_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(6)
    other = eps.copy()
    other[rng.integers(6)] += 1e-3
    assert diffusion_loss(Tensor(eps), eps).item() == 0.0
    assert diffusion_loss(Tensor(other), eps).item() > 0.0


def test_timesteps_single_step_schedule():
    assert sample_timesteps(7, build_schedule(1, 0.1, 0.1), np.random.default_rng(0)) == [1] * 7


def test_timesteps_uniform_chi_square():
    s = build_schedule(50, 1e-3, 0.2)
    t = np.array(sample_timesteps(10_000, s, np.random.default_rng(9)))
    counts = np.bincount(t, minlength=51)[1:]
    assert counts.sum() == 10_000 and t.min() >= 1 and t.max() <= 50
    assert chisquare(counts).pvalue > 0.01


def test_timesteps_golden_sequence():
    expected = [int(v) for v in (FIXTURES / "timesteps_seed42_b4_T10.txt").read_text().split()]
    assert sample_timesteps(4, build_schedule(10, 1e-4, 2e-2), np.random.default_rng(42)) == expected


def test_one_step_sampler_closed_form():
    s = build_schedule(1, 0.1, 0.1)
    x1 = np.array([0.3, -1.2, 2.0])
    out = ddpm_sample(lambda x, t, c: np.zeros_like(x), None, s, x1.shape, np.random.default_rng(0), x_init=x1,
                      add_noise=False)
    assert np.allclose(out, [v / math.sqrt(0.9) for v in x1], atol=1e-15)


def test_sampler_recovers_x0_with_oracle_denoiser():
    s = build_schedule(50, 2e-3, 0.4)
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal((2, 3))

    def oracle(x, t, _):
        ab = s.alpha_bar[t - 1]
        return (x - np.sqrt(ab) * x0) / np.sqrt(1 - ab)

    out = ddpm_sample(oracle, None, s, x0.shape, np.random.default_rng(5))
    assert np.max(np.abs(out - x0)) < 1e-6


def test_sampler_deterministic_and_counts_calls():
    s = build_schedule(12, 1e-3, 0.2)
    calls = []

    def den(x, t, c):
        calls.append(t)
        return 0.1 * x

    a = ddpm_sample(den, None, s, (4,), np.random.default_rng(6))
    b = ddpm_sample(den, None, s, (4,), np.random.default_rng(6))
    assert np.array_equal(a, b)
    assert calls[:12] == list(range(12, 0, -1)) and len(calls) == 24


def test_sampler_names_failing_step():
    s = build_schedule(5, 1e-3, 0.2)
    with pytest.raises(NumericError, match="t=3"):
        ddpm_sample(lambda x, t, c: np.full_like(x, np.nan) if t == 3 else x, None, s, (2,), np.random.default_rng(0))


def test_guidance_combination():
    den = lambda x, t, c: x * c  # noqa: E731
    x = np.array([1.0, 2.0])
    assert np.allclose(guided(den, 3.0, 1.0, 3.0)(x, 1), x * (1 + 3 * 2))
    calls = []

    def spy(x, t, c):
        calls.append(c)
        return x * c

    assert np.array_equal(guided(spy, 5.0, 2.0, 0.0)(x, 1), x * 2.0)
    assert calls == [5.0, 2.0]


def test_loss_gradient_is_scaled_residual():
    rng = np.random.default_rng(8)
    pred = Tensor(rng.standard_normal(6), requires_grad=True)
    eps = rng.standard_normal(6)
    ad.backward(diffusion_loss(pred, eps))
    assert np.allclose(pred.grad, 2 * (pred.data - eps) / 6, atol=1e-15)
