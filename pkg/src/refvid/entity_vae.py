"""Patch autoencoder for reference entities and video frames.

A deterministic linear patch encoder: each non-overlapping P x P patch of a
premultiplied RGBA image maps to ``c_lat`` channels, so a H x W image becomes
an (H/P) x (W/P) x c_lat grid. Video frames go through the same encoder with
alpha = 1, giving one shared latent space for targets and references.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import CapacityError, ConfigError, ResizeRequiredError
from .optim import OptimizerState, adamw_step


@dataclass(frozen=True)
class EntityConfig:
    patch: int = 4
    c_lat: int = 8
    bias: bool = True
    # KL regularisation hook; unused by the deterministic encoder.
    kl_weight: float = 0.0

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 4


@dataclass
class EntityLatent:
    grid: np.ndarray
    source_label: str = ""


@dataclass
class VisualTokens:
    tokens: Tensor
    mask: np.ndarray
    counts: list[int] = field(default_factory=list)

    @property
    def M(self) -> int:
        return self.tokens.shape[0]


def init_params(cfg: EntityConfig, rng: np.random.Generator, zero: bool = False) -> nn.Params:
    pd = cfg.patch_dim
    if zero:
        p = {"enc_w": nn.zeros((pd, cfg.c_lat)), "dec_w": nn.zeros((cfg.c_lat, pd))}
    else:
        p = {"enc_w": nn.xavier(rng, pd, cfg.c_lat), "dec_w": nn.xavier(rng, cfg.c_lat, pd)}
    if cfg.bias:
        p["enc_b"] = nn.zeros((cfg.c_lat,))
        p["dec_b"] = nn.zeros((pd,))
    return p


def premultiply(img: np.ndarray) -> np.ndarray:
    """RGBA (straight alpha) or RGB image -> premultiplied RGBA."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape[-1] == 3:
        return np.concatenate([img, np.ones(img.shape[:-1] + (1,))], axis=-1)
    if img.shape[-1] != 4:
        raise ConfigError(f"expected RGB or RGBA image, got trailing extent {img.shape[-1]}")
    a = img[..., 3:4]
    return np.concatenate([img[..., :3] * a, a], axis=-1)


def unpremultiply(img: np.ndarray) -> np.ndarray:
    a = np.clip(img[..., 3:4], 0.0, 1.0)
    rgb = np.where(a > 1e-6, img[..., :3] / np.maximum(a, 1e-6), 0.0)
    return np.concatenate([np.clip(rgb, 0.0, 1.0), a], axis=-1)


def to_patches(img: np.ndarray, P: int) -> np.ndarray:
    """(H, W, C) -> (H/P * W/P, P*P*C), row-major over the patch grid."""
    H, W, C = img.shape
    if H % P or W % P:
        raise ResizeRequiredError(f"image {H}x{W} not divisible by patch size {P}; resize required")
    h, w = H // P, W // P
    return img.reshape(h, P, w, P, C).transpose(0, 2, 1, 3, 4).reshape(h * w, P * P * C)


def from_patches(patches: np.ndarray, h: int, w: int, P: int, C: int = 4) -> np.ndarray:
    return patches.reshape(h, w, P, P, C).transpose(0, 2, 1, 3, 4).reshape(h * P, w * P, C)


def _encode_rows(p: dict[str, Tensor], rows: Tensor) -> Tensor:
    return nn.linear(rows, p["enc_w"], p.get("enc_b"))


def _decode_rows(p: dict[str, Tensor], z: Tensor) -> Tensor:
    return nn.linear(z, p["dec_w"], p.get("dec_b"))


def encode_entity(params: nn.Params, img: np.ndarray, cfg: EntityConfig, label: str = "") -> EntityLatent:
    x = premultiply(img)
    rows = to_patches(x, cfg.patch)
    H, W = x.shape[:2]
    z = _encode_rows(nn.leaves(params, False), Tensor(rows)).data
    return EntityLatent(z.reshape(H // cfg.patch, W // cfg.patch, cfg.c_lat).copy(), label)


def decode_entity(params: nn.Params, lat: EntityLatent, cfg: EntityConfig) -> np.ndarray:
    """Latent grid -> premultiplied RGBA image."""
    h, w, c = lat.grid.shape
    if c != cfg.c_lat or params["dec_w"].shape[0] != c:
        raise ConfigError(f"latent width {c} does not match decoder config c_lat={cfg.c_lat}")
    rows = _decode_rows(nn.leaves(params, False), Tensor(lat.grid.reshape(h * w, c))).data
    return from_patches(rows, h, w, cfg.patch)


def encode_video(params: nn.Params, frames: np.ndarray, cfg: EntityConfig) -> np.ndarray:
    """(F, H, W, 3) RGB frames -> (F, h, w, c_lat) latents."""
    return np.stack([encode_entity(params, f, cfg).grid for f in frames])


def decode_video(params: nn.Params, lat: np.ndarray, cfg: EntityConfig) -> np.ndarray:
    """Latents -> (F, H, W, 3) RGB clamped to [0, 1]."""
    out = [decode_entity(params, EntityLatent(g), cfg)[..., :3] for g in lat]
    return np.clip(np.stack(out), 0.0, 1.0)


def recon_loss_rows(p: dict[str, Tensor], rows: np.ndarray) -> Tensor:
    target = Tensor(rows)
    recon = _decode_rows(p, _encode_rows(p, target))
    return ad.mean(ad.square(ad.sub(recon, target)))


def vae_recon_loss(params: nn.Params, img: np.ndarray, cfg: EntityConfig) -> float:
    """MSE between premultiplied RGBA input and its reconstruction.

    Premultiplication weights the colour error by alpha; fully transparent
    pixels only contribute through the alpha channel.
    """
    rows = to_patches(premultiply(img), cfg.patch)
    return recon_loss_rows(nn.leaves(params, False), rows).item()


def fit(
    images: Sequence[np.ndarray],
    cfg: EntityConfig,
    steps: int = 500,
    lr: float = 1e-2,
    seed: int = 0,
    params: nn.Params | None = None,
    batch_rows: int | None = None,
) -> tuple[nn.Params, list[float]]:
    """Train the autoencoder on a set of RGB/RGBA images with Adam."""
    rng = np.random.default_rng(seed)
    params = params if params is not None else init_params(cfg, rng)
    rows = np.concatenate([to_patches(premultiply(im), cfg.patch) for im in images])
    state = OptimizerState()
    curve = []
    for _ in range(steps):
        batch = rows if batch_rows is None or batch_rows >= len(rows) else rows[rng.choice(len(rows), batch_rows, replace=False)]
        leaves = nn.leaves(params)
        loss = recon_loss_rows(leaves, batch)
        ad.backward(loss)
        curve.append(loss.item())
        params, state = adamw_step(params, {k: t.grad for k, t in leaves.items()}, state, lr, 0.9, 0.999, 0.0)
    return params, curve


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)


def flatten_pad(latents: Sequence[EntityLatent], M: int, proj: Tensor | None = None) -> VisualTokens:
    """Row-major flatten each grid, concatenate in order, zero-pad to ``M`` rows.

    With ``proj`` (bias-free c_lat x d) the rows are projected to width d;
    padded rows stay exactly zero.
    """
    counts = [int(l.grid.shape[0] * l.grid.shape[1]) for l in latents]
    if sum(counts) > M:
        detail = ", ".join(f"{l.source_label or i}:{c}" for i, (l, c) in enumerate(zip(latents, counts)))
        raise CapacityError(f"{sum(counts)} visual tokens exceed capacity M={M} ({detail})")
    if latents:
        c = latents[0].grid.shape[2]
        if any(l.grid.shape[2] != c for l in latents):
            raise ConfigError("entity latents have mismatched channel widths")
    elif proj is not None:
        c = proj.shape[0]
    else:
        c = 1
    raw = np.zeros((M, c), dtype=ad.get_dtype())
    mask = np.zeros(M, dtype=bool)
    row = 0
    for l, n in zip(latents, counts):
        raw[row:row + n] = l.grid.reshape(n, c)
        mask[row:row + n] = True
        row += n
    tokens = Tensor(raw)
    if proj is not None:
        tokens = ad.matmul(tokens, proj)
    return VisualTokens(tokens, mask, counts)
