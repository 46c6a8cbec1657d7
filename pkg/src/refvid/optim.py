"""AdamW, warmup + cosine-with-restarts learning rate, global-norm clipping."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 1e-5
    warmup_steps: int = 100
    cycle_steps: int = 1000
    cycle_mult: float = 2.0
    min_ratio: float = 0.01

    @property
    def lr_min(self) -> float:
        return self.base_lr * self.min_ratio


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.95,
    wd: float = 0.001,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One decoupled-weight-decay Adam update; returns new arrays, inputs untouched.

    Parameters without a gradient entry are passed through unchanged.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    step = state.step + 1
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    new_params, new_m, new_v = {}, dict(state.m), dict(state.v)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p
            continue
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        decayed = p - lr * wd * p
        new_params[name] = decayed - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, OptimizerState(new_m, new_v, step)


def lr_at(step: int, sched: LrSchedule) -> float:
    """Linear warmup to ``base_lr``, then cosine cycles down to ``lr_min``.

    Cycle ``k`` (0-based) lasts ``cycle_steps * cycle_mult**k`` steps; at each
    restart the rate jumps back to ``base_lr``.
    """
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    if sched.warmup_steps > 0 and step <= sched.warmup_steps:
        return sched.base_lr * step / sched.warmup_steps
    pos = step - sched.warmup_steps
    length = float(sched.cycle_steps)
    while pos >= length:
        pos -= length
        length *= sched.cycle_mult
    frac = pos / length
    return sched.lr_min + 0.5 * (sched.base_lr - sched.lr_min) * (1.0 + math.cos(math.pi * frac))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for k in sorted(grads):
        g = grads[k]
        total += float(np.sum(g * g))
    return math.sqrt(total)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    if max_norm <= 0:
        raise ConfigError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if norm <= max_norm:
        return dict(grads), norm
    factor = max_norm / norm
    out = {k: g * factor for k, g in grads.items()}
    # rounding can leave the rescaled norm an ulp above max_norm
    while global_norm(out) > max_norm:
        factor = math.nextafter(factor, 0.0)
        out = {k: g * factor for k, g in grads.items()}
    return out, norm
