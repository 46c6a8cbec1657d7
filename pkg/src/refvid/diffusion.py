"""Linear-beta DDPM schedule, forward noising, epsilon loss and ancestral sampling.

Timesteps are 1-based: ``t`` in ``1..T_diff``; table index is ``t - 1``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, NumericError


@dataclass(frozen=True)
class Schedule:
    T_diff: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def to_dict(self) -> dict:
        return {"T_diff": self.T_diff, "beta": self.beta.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        beta = np.asarray(d["beta"], dtype=np.float64)
        alpha = 1.0 - beta
        return cls(int(d["T_diff"]), beta, alpha, np.cumprod(alpha))


def build_schedule(T_diff: int, beta_min: float, beta_max: float) -> Schedule:
    if T_diff < 1:
        raise ConfigError(f"T_diff must be >= 1, got {T_diff}")
    if not 0 < beta_min <= beta_max < 1:
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    beta = np.linspace(beta_min, beta_max, T_diff, dtype=np.float64)
    alpha = 1.0 - beta
    return Schedule(T_diff, beta, alpha, np.cumprod(alpha))


def _check_t(t: int, sched: Schedule) -> None:
    if not 1 <= int(t) <= sched.T_diff:
        raise ConfigError(f"timestep {t} outside 1..{sched.T_diff}")


def forward_noise(x0: np.ndarray, eps: np.ndarray, t: int, sched: Schedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps for a single example."""
    _check_t(t, sched)
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise DimensionError(f"x0 {x0.shape} and eps {eps.shape} differ")
    ab = sched.alpha_bar[t - 1]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def forward_noise_batch(x0: np.ndarray, eps: np.ndarray, t, sched: Schedule) -> np.ndarray:
    """Batched variant: leading axis is the batch, ``t`` one entry per element."""
    t = np.asarray(t, dtype=np.int64)
    if x0.shape != eps.shape or t.shape != (x0.shape[0],):
        raise DimensionError(f"batch shapes x0 {x0.shape}, eps {eps.shape}, t {t.shape}")
    for ti in t:
        _check_t(int(ti), sched)
    ab = sched.alpha_bar[t - 1].reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def diffusion_loss(eps_pred: Tensor, eps) -> Tensor:
    """Mean squared error over all elements."""
    eps = ad.as_tensor(eps)
    if eps_pred.shape != eps.shape:
        raise DimensionError(f"eps_pred {eps_pred.shape} vs eps {eps.shape}")
    return ad.mean(ad.square(ad.sub(eps_pred, eps)))


def sample_timesteps(batch: int, sched: Schedule, rng: np.random.Generator) -> list[int]:
    return [int(v) for v in rng.integers(1, sched.T_diff + 1, size=batch)]


def guided(denoiser: Callable, cond, uncond, g: float) -> Callable:
    """Classifier-free guidance: eps_u + g (eps_c - eps_u); two calls per step."""

    def fn(x, t, _cond=None):
        e_c = denoiser(x, t, cond)
        e_u = denoiser(x, t, uncond)
        return e_u + g * (e_c - e_u)

    return fn


def ddpm_sample(
    denoiser: Callable,
    cond,
    sched: Schedule,
    shape,
    rng: np.random.Generator,
    x_init: np.ndarray | None = None,
    add_noise: bool = True,
) -> np.ndarray:
    """Ancestral sampling from t = T_diff down to 1.

    ``denoiser(x_t, t, cond)`` returns an epsilon estimate as a numpy array.
    Posterior variance is beta_tilde_t; no noise is added at t = 1.
    """
    x = rng.standard_normal(shape) if x_init is None else np.array(x_init, dtype=np.float64)
    for t in range(sched.T_diff, 0, -1):
        eps = np.asarray(denoiser(x, t, cond))
        beta, alpha, ab = sched.beta[t - 1], sched.alpha[t - 1], sched.alpha_bar[t - 1]
        x = (x - beta / np.sqrt(1.0 - ab) * eps) / np.sqrt(alpha)
        if t > 1 and add_noise:
            ab_prev = sched.alpha_bar[t - 2]
            var = (1.0 - ab_prev) / (1.0 - ab) * beta
            x = x + np.sqrt(var) * rng.standard_normal(shape)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite sample at step t={t}")
    return x
