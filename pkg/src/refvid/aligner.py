"""Latent-query resampler mapping MLLM hidden states onto the teacher feature space.

K learned latent rows cross-attend to the projected input sequence (keys and
values are the inputs concatenated with the latents) through a stack of
attention blocks, so any input length L yields exactly K output rows.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, DivergenceError
from .optim import LrSchedule, OptimizerState, adamw_step, clip_grad_norm, lr_at

log = logging.getLogger(__name__)

COS_EPS = 1e-8


@dataclass(frozen=True)
class AlignerConfig:
    layers: int = 6
    width: int = 768
    heads: int = 8
    K: int = 226
    in_dim: int = 2048
    out_dim: int = 128
    ffn_mult: int = 4

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError(f"aligner width {self.width} not divisible by heads {self.heads}")
        if self.K < 1:
            raise ConfigError("aligner needs at least one latent token")


@dataclass
class AlignedFeatures:
    tokens: Tensor  # K x d


def init_params(cfg: AlignerConfig, rng: np.random.Generator, zero_out: bool = False) -> nn.Params:
    w = cfg.width
    p: nn.Params = {
        "in_w": nn.xavier(rng, cfg.in_dim, w),
        "in_b": nn.zeros((w,)),
        "latents": nn.normal(rng, (cfg.K, w), 1.0),
    }
    for i in range(cfg.layers):
        p.update({
            f"l{i}.ln_q_g": nn.ones((w,)), f"l{i}.ln_q_b": nn.zeros((w,)),
            f"l{i}.ln_kv_g": nn.ones((w,)), f"l{i}.ln_kv_b": nn.zeros((w,)),
            f"l{i}.wq": nn.xavier(rng, w, w), f"l{i}.wk": nn.xavier(rng, w, w),
            f"l{i}.wv": nn.xavier(rng, w, w), f"l{i}.wo": nn.xavier(rng, w, w),
            f"l{i}.ln_f_g": nn.ones((w,)), f"l{i}.ln_f_b": nn.zeros((w,)),
            f"l{i}.w1": nn.xavier(rng, w, cfg.ffn_mult * w), f"l{i}.b1": nn.zeros((cfg.ffn_mult * w,)),
            f"l{i}.w2": nn.xavier(rng, cfg.ffn_mult * w, w), f"l{i}.b2": nn.zeros((w,)),
        })
    p["ln_out_g"] = nn.ones((w,))
    p["ln_out_b"] = nn.zeros((w,))
    p["out_w"] = nn.zeros((w, cfg.out_dim)) if zero_out else nn.xavier(rng, w, cfg.out_dim)
    p["out_b"] = nn.zeros((cfg.out_dim,))
    return p


def align_tensor(p: dict[str, Tensor], h, cfg: AlignerConfig) -> Tensor:
    h = ad.as_tensor(h)
    if h.ndim != 2 or h.shape[1] != cfg.in_dim:
        raise DimensionError(f"aligner expects width {cfg.in_dim}, got input of shape {h.shape}")
    x = nn.linear(h, p["in_w"], p["in_b"])
    lat = p["latents"]
    for i in range(cfg.layers):
        g = lambda name: p[f"l{i}.{name}"]  # noqa: E731
        q = ad.layer_norm(lat, g("ln_q_g"), g("ln_q_b"))
        kv = ad.layer_norm(ad.concat_rows([x, lat]), g("ln_kv_g"), g("ln_kv_b"))
        lat = ad.add(lat, nn.cross_attention(q, kv, g("wq"), g("wk"), g("wv"), g("wo"), cfg.heads))
        f = ad.layer_norm(lat, g("ln_f_g"), g("ln_f_b"))
        f = nn.linear(ad.gelu(nn.linear(f, g("w1"), g("b1"))), g("w2"), g("b2"))
        lat = ad.add(lat, f)
    out = ad.layer_norm(lat, p["ln_out_g"], p["ln_out_b"])
    return nn.linear(out, p["out_w"], p["out_b"])


def align(params: nn.Params | dict[str, Tensor], h, cfg: AlignerConfig) -> AlignedFeatures:
    """HiddenStates (or an L x in_dim array) -> AlignedFeatures of K rows."""
    tokens = getattr(h, "tokens", h)
    p = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
    return AlignedFeatures(align_tensor(p, tokens, cfg))


def _pair(a, b, name: str) -> tuple[Tensor, Tensor]:
    a = ad.as_tensor(getattr(a, "tokens", a))
    b = ad.as_tensor(getattr(b, "tokens", b))
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def loss_mse(f_mllm, f_t5) -> Tensor:
    """Mean over token rows of the squared L2 row distance."""
    a, b = _pair(f_mllm, f_t5, "loss_mse")
    return ad.scale(ad.sum(ad.square(ad.sub(a, b))), 1.0 / a.shape[0])


def loss_cos(f_mllm, f_t5) -> Tensor:
    """Mean over token rows of 1 - cosine similarity.

    The norm product is floored at 1e-8; a row that is exactly zero on both
    sides contributes 1 and is logged as degenerate.
    """
    a, b = _pair(f_mllm, f_t5, "loss_cos")
    both_zero = ~a.data.any(axis=1) & ~b.data.any(axis=1)
    if both_zero.any():
        log.warning("loss_cos: %d degenerate all-zero row pair(s)", int(both_zero.sum()))
    dot = ad.sum_last(ad.mul(a, b))
    # sqrt(|a|^2 |b|^2) rather than |a| |b| so identical rows give cosine exactly 1
    den = ad.sqrt(ad.mul(ad.sum_last(ad.square(a)), ad.sum_last(ad.square(b))))
    den = ad.add_const(den, np.where(den.data < COS_EPS, COS_EPS - den.data, 0.0))
    cos = ad.div(dot, den)
    return ad.add_const(ad.neg(ad.mean(cos)), 1.0)


def loss_total(f_mllm, f_t5, lam_mse: float = 1.0, lam_cos: float = 1.0) -> Tensor:
    if lam_mse < 0 or lam_cos < 0:
        raise ConfigError("loss weights must be non-negative")
    return ad.add(ad.scale(loss_mse(f_mllm, f_t5), lam_mse), ad.scale(loss_cos(f_mllm, f_t5), lam_cos))


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    warmup_steps: int = 100
    cycle_steps: int = 1000
    cycle_mult: float = 2.0
    min_ratio: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.001
    max_grad_norm: float = 1.0
    lam_mse: float = 1.0
    lam_cos: float = 1.0
    seed: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 100


@dataclass
class PretrainResult:
    params: nn.Params
    curve: list[dict]


def pretrain_aligner(
    dataset: Sequence[tuple],
    cfg: AlignerConfig,
    opt: PretrainConfig = PretrainConfig(),
    params: nn.Params | None = None,
    log_path=None,
) -> PretrainResult:
    """Fit the aligner to teacher features with the weighted MSE + cosine loss.

    ``dataset`` holds ``(hidden_states, teacher_features)`` pairs; one pair is
    drawn per step. Aborts with :class:`DivergenceError` when the loss stays
    above ``divergence_factor`` x its first value for ``divergence_patience``
    consecutive steps.
    """
    if not dataset:
        raise ConfigError("pretrain_aligner needs a nonempty dataset")
    rng = np.random.default_rng(opt.seed)
    if params is None:
        params = init_params(cfg, rng)
    sched = LrSchedule(opt.lr, opt.warmup_steps, opt.cycle_steps, opt.cycle_mult, opt.min_ratio)
    state = OptimizerState()
    curve: list[dict] = []
    first = None
    bad = 0
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "loss_mse", "loss_cos", "loss_total", "lr"])
    try:
        for step in range(opt.steps):
            h, target = dataset[int(rng.integers(len(dataset)))]
            leaves = nn.leaves(params)
            out = align_tensor(leaves, getattr(h, "tokens", h), cfg)
            tgt = Tensor(getattr(target, "tokens", target))
            lm, lc = loss_mse(out, tgt), loss_cos(out, tgt)
            total = ad.add(ad.scale(lm, opt.lam_mse), ad.scale(lc, opt.lam_cos))
            ad.backward(total)
            lr = lr_at(step + 1, sched)
            grads, _ = clip_grad_norm({k: t.grad for k, t in leaves.items()}, opt.max_grad_norm)
            params, state = adamw_step(params, grads, state, lr, opt.beta1, opt.beta2, opt.weight_decay)
            row = {"step": step, "loss_mse": lm.item(), "loss_cos": lc.item(), "loss_total": total.item(), "lr": lr}
            curve.append(row)
            if writer:
                writer.writerow([row[k] for k in ("step", "loss_mse", "loss_cos", "loss_total", "lr")])
            if first is None:
                first = row["loss_total"]
            bad = bad + 1 if row["loss_total"] > opt.divergence_factor * first else 0
            if bad >= opt.divergence_patience:
                raise DivergenceError(
                    f"aligner pretraining diverged at step {step}: loss {row['loss_total']:.4g} vs initial {first:.4g}"
                )
    finally:
        if fh:
            fh.close()
    return PretrainResult(params, curve)


def evaluate_alignment(params: nn.Params, dataset: Sequence[tuple], cfg: AlignerConfig,
                       lam_mse: float = 1.0, lam_cos: float = 1.0) -> float:
    """Mean loss_total over a dataset of (hidden, teacher) pairs."""
    leaves = nn.leaves(params, False)
    vals = [
        loss_total(align_tensor(leaves, getattr(h, "tokens", h), cfg), getattr(t, "tokens", t), lam_mse, lam_cos).item()
        for h, t in dataset
    ]
    return float(np.mean(vals))


def config_dict(cfg: AlignerConfig) -> dict:
    return asdict(cfg)

