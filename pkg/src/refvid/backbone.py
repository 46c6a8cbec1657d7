"""Dual-branch diffusion transformer with joint attention over [condition | noise] tokens.

Condition rows (aligned text features followed by visual entity tokens) and
noisy-video rows keep separate adaLN modulation and feed-forward weights but
share one joint attention per block. Timestep conditioning modulates both
branches; gates and the final projection start at zero.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class BackboneConfig:
    depth: int = 4
    width: int = 128
    heads: int = 4
    t_emb: int = 128
    ffn_mult: int = 4
    frames: int = 8
    lat_h: int = 8
    lat_w: int = 8
    lat_c: int = 8
    patch: int = 2
    K: int = 32
    M: int = 96
    vis_in: int = 8
    # "learned": per-row learned positions on both condition blocks; "none": visual block unpositioned
    visual_pos: str = "learned"
    t_scale: float = 1.0

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError(f"backbone width {self.width} not divisible by heads {self.heads}")
        if self.lat_h % self.patch or self.lat_w % self.patch:
            raise ConfigError(f"latent {self.lat_h}x{self.lat_w} not divisible by patch {self.patch}")
        if self.visual_pos not in ("learned", "none"):
            raise ConfigError(f"visual_pos must be 'learned' or 'none', got {self.visual_pos!r}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.lat_h // self.patch, self.lat_w // self.patch

    @property
    def T(self) -> int:
        gh, gw = self.grid
        return self.frames * gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.lat_c

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        return (self.frames, self.lat_h, self.lat_w, self.lat_c)


@dataclass
class UnifiedFeatures:
    tokens: Tensor
    mask: np.ndarray
    K: int = 0


@dataclass
class NoisyVideoTokens:
    tokens: np.ndarray | Tensor
    t: int
    patch_meta: tuple  # (frames, lat_h, lat_w, lat_c, patch)


# ------------------------------------------------------------------ bookkeeping

def concat_unified(f_mllm, f_visual) -> UnifiedFeatures:
    a = getattr(f_mllm, "tokens", f_mllm)
    a = ad.as_tensor(a)
    v = ad.as_tensor(f_visual.tokens)
    if a.shape[1:] != v.shape[1:]:
        raise DimensionError(f"unified concat width mismatch: {a.shape} vs {v.shape}")
    mask = np.concatenate([np.ones(a.shape[0], dtype=bool), np.asarray(f_visual.mask, dtype=bool)])
    return UnifiedFeatures(ad.concat_rows([a, v]), mask, a.shape[0])


def concat_input(unified: UnifiedFeatures, noise: NoisyVideoTokens) -> tuple[Tensor, np.ndarray]:
    n = ad.as_tensor(noise.tokens)
    u = unified.tokens
    if u.shape[0] and u.shape[1:] != n.shape[1:]:
        raise DimensionError(f"input concat width mismatch: {u.shape} vs {n.shape}")
    mask = np.concatenate([unified.mask, np.ones(n.shape[0], dtype=bool)])
    x = n if u.shape[0] == 0 else ad.concat_rows([u, n])
    return x, mask


def patchify(latent: np.ndarray, patch: int, t: int = 0) -> NoisyVideoTokens:
    """(F, h, w, c) -> (F * h/p * w/p, p*p*c) tokens ordered frame, row, col."""
    F, h, w, c = latent.shape
    if h % patch or w % patch:
        raise DimensionError(f"latent {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    tok = latent.reshape(F, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5).reshape(F * gh * gw, patch * patch * c)
    return NoisyVideoTokens(tok, t, (F, h, w, c, patch))


def unpatchify(tokens: np.ndarray, patch_meta: tuple) -> np.ndarray:
    F, h, w, c, p = patch_meta
    gh, gw = h // p, w // p
    if tokens.shape != (F * gh * gw, p * p * c):
        raise DimensionError(f"tokens {tokens.shape} inconsistent with patch meta {patch_meta}")
    return tokens.reshape(F, gh, gw, p, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(F, h, w, c)


def token_index(frame: int, row: int, col: int, grid: tuple[int, int]) -> int:
    return (frame * grid[0] + row) * grid[1] + col


def position_indices(cfg: BackboneConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    gh, gw = cfg.grid
    f, r, c = np.meshgrid(np.arange(cfg.frames), np.arange(gh), np.arange(gw), indexing="ij")
    return f.reshape(-1), r.reshape(-1), c.reshape(-1)


# ------------------------------------------------------------------ parameters

def init_params(cfg: BackboneConfig, rng: np.random.Generator, zero_final: bool = True) -> nn.Params:
    d, pd = cfg.width, cfg.patch_dim
    gh, gw = cfg.grid
    f = cfg.ffn_mult * d
    p: nn.Params = {
        "vis_proj": nn.xavier(rng, cfg.vis_in, d),
        "txt_pos": nn.normal(rng, (cfg.K, d), 0.02),
        "patch_w": nn.xavier(rng, pd, d),
        "patch_b": nn.zeros((d,)),
        "frame_pos": nn.normal(rng, (cfg.frames, d), 0.02),
        "row_pos": nn.normal(rng, (gh, d), 0.02),
        "col_pos": nn.normal(rng, (gw, d), 0.02),
        "t_w1": nn.xavier(rng, cfg.t_emb, d),
        "t_b1": nn.zeros((d,)),
        "t_w2": nn.xavier(rng, d, d),
        "t_b2": nn.zeros((d,)),
    }
    if cfg.visual_pos == "learned":
        p["vis_pos"] = nn.normal(rng, (cfg.M, d), 0.02)
    for i in range(cfg.depth):
        for name in ("wq", "wk", "wv", "wo"):
            p[f"b{i}.{name}"] = nn.xavier(rng, d, d)
        for br in ("c", "x"):
            p[f"b{i}.{br}.mod_w"] = nn.zeros((d, 6 * d))
            p[f"b{i}.{br}.mod_b"] = nn.zeros((6 * d,))
            p[f"b{i}.{br}.w1"] = nn.xavier(rng, d, f)
            p[f"b{i}.{br}.b1"] = nn.zeros((f,))
            p[f"b{i}.{br}.w2"] = nn.xavier(rng, f, d)
            p[f"b{i}.{br}.b2"] = nn.zeros((d,))
    p["final.mod_w"] = nn.zeros((d, 2 * d))
    p["final.mod_b"] = nn.zeros((2 * d,))
    p["final.w"] = nn.zeros((d, pd)) if zero_final else nn.xavier(rng, d, pd)
    p["final.b"] = nn.zeros((pd,))
    return p


# ------------------------------------------------------------------ forward

def _chunks(v: Tensor, n: int) -> list[Tensor]:
    """Split a 1 x (n*d) row into n vectors of shape (d,)."""
    d = v.shape[1] // n
    return [ad.reshape(ad.slice_cols(v, i * d, (i + 1) * d), (d,)) for i in range(n)]


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return ad.add_row(ad.mul_row(ad.layer_norm(x, eps=1e-6), ad.add_const(scale, 1.0)), shift)


def timestep_embedding(p: dict[str, Tensor], t: int, cfg: BackboneConfig) -> Tensor:
    emb = Tensor(nn.sinusoidal_embedding(t * cfg.t_scale, cfg.t_emb)[None, :])
    h = ad.silu(nn.linear(emb, p["t_w1"], p["t_b1"]))
    return nn.linear(h, p["t_w2"], p["t_b2"])


def condition_positions(p: dict[str, Tensor], n_rows: int, K: int, cfg: BackboneConfig) -> Tensor | None:
    if n_rows == 0:
        return None
    parts = [p["txt_pos"]] if K else []
    M = n_rows - K
    if M:
        if cfg.visual_pos == "learned":
            parts.append(p["vis_pos"])
        else:
            parts.append(Tensor(np.zeros((M, cfg.width))))
    return ad.concat_rows(parts)


def denoise_tensor(p: dict[str, Tensor], x_t: np.ndarray, t: int, cond: UnifiedFeatures | None,
                   cfg: BackboneConfig) -> Tensor:
    """Epsilon prediction as a (frames, lat_h, lat_w, lat_c) Tensor."""
    x_t = np.asarray(x_t)
    if x_t.shape != cfg.latent_shape:
        raise DimensionError(f"latent shape {x_t.shape} inconsistent with config {cfg.latent_shape}")
    noisy = patchify(x_t, cfg.patch, t)
    fi, ri, ci = position_indices(cfg)
    pos = ad.add(ad.add(ad.gather_rows(p["frame_pos"], fi), ad.gather_rows(p["row_pos"], ri)),
                 ad.gather_rows(p["col_pos"], ci))
    xs = ad.add(nn.linear(Tensor(noisy.tokens), p["patch_w"], p["patch_b"]), pos)

    n_c = 0 if cond is None else cond.tokens.shape[0]
    if cond is not None and n_c:
        if n_c != cfg.K + cfg.M and cfg.M:
            raise DimensionError(f"condition has {n_c} rows; config expects K+M={cfg.K + cfg.M}")
        xc = ad.add(cond.tokens, condition_positions(p, n_c, cond.K, cfg))
        mask = np.concatenate([cond.mask, np.ones(cfg.T, dtype=bool)])
    else:
        xc = None
        mask = None

    c = ad.silu(timestep_embedding(p, t, cfg))
    for i in range(cfg.depth):
        mx = _chunks(nn.linear(c, p[f"b{i}.x.mod_w"], p[f"b{i}.x.mod_b"]), 6)
        hx = _modulate(xs, mx[0], mx[1])
        if xc is not None:
            mc = _chunks(nn.linear(c, p[f"b{i}.c.mod_w"], p[f"b{i}.c.mod_b"]), 6)
            hc = _modulate(xc, mc[0], mc[1])
            joint = ad.concat_rows([hc, hx])
        else:
            joint = hx
        att = nn.joint_attention(joint, p[f"b{i}.wq"], p[f"b{i}.wk"], p[f"b{i}.wv"], mask, cfg.heads, p[f"b{i}.wo"])
        if xc is not None:
            xc = ad.add(xc, ad.mul_row(ad.slice_rows(att, 0, n_c), mc[2]))
            xs = ad.add(xs, ad.mul_row(ad.slice_rows(att, n_c, n_c + cfg.T), mx[2]))
            xc = ad.add(xc, ad.mul_row(_ffn(p, i, "c", _modulate(xc, mc[3], mc[4])), mc[5]))
        else:
            xs = ad.add(xs, ad.mul_row(att, mx[2]))
        xs = ad.add(xs, ad.mul_row(_ffn(p, i, "x", _modulate(xs, mx[3], mx[4])), mx[5]))

    fm = _chunks(nn.linear(c, p["final.mod_w"], p["final.mod_b"]), 2)
    out = nn.linear(_modulate(xs, fm[0], fm[1]), p["final.w"], p["final.b"])
    return _unpatch_tensor(out, cfg)


def _ffn(p: dict[str, Tensor], i: int, br: str, h: Tensor) -> Tensor:
    h = ad.gelu(nn.linear(h, p[f"b{i}.{br}.w1"], p[f"b{i}.{br}.b1"]))
    return nn.linear(h, p[f"b{i}.{br}.w2"], p[f"b{i}.{br}.b2"])


def _unpatch_tensor(out: Tensor, cfg: BackboneConfig) -> Tensor:
    """Differentiable unpatchify via a fixed permutation gather."""
    F, h, w, ch = cfg.latent_shape
    perm = _unpatch_perm(cfg)
    flat = ad.reshape(out, (out.data.size, 1))
    return ad.reshape(ad.gather_rows(flat, perm), (F, h, w, ch))


_PERM_CACHE: dict = {}


def _unpatch_perm(cfg: BackboneConfig) -> np.ndarray:
    key = (cfg.latent_shape, cfg.patch)
    if key not in _PERM_CACHE:
        F, h, w, ch = cfg.latent_shape
        idx = np.arange(F * h * w * ch).reshape(cfg.T, cfg.patch_dim)
        _PERM_CACHE[key] = unpatchify(idx, (F, h, w, ch, cfg.patch)).reshape(-1)
    return _PERM_CACHE[key]


def denoise_predict(params: nn.Params, x_t: np.ndarray, t: int, cond: UnifiedFeatures | None,
                    cfg: BackboneConfig) -> np.ndarray:
    p = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
    return denoise_tensor(p, x_t, t, cond, cfg).data


def config_dict(cfg: BackboneConfig) -> dict:
    return asdict(cfg)
