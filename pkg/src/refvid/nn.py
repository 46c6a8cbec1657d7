"""Functional layer helpers shared by the aligner and the backbone.

Models are plain ``dict[str, np.ndarray]`` parameter maps plus a forward
function taking the matching ``dict[str, Tensor]``.
"""
from __future__ import annotations

import hashlib
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError

Params = dict


def normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(ad.get_dtype())


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return normal(rng, (fan_in, fan_out), math.sqrt(2.0 / (fan_in + fan_out)))


def zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=ad.get_dtype())


def ones(shape) -> np.ndarray:
    return np.ones(shape, dtype=ad.get_dtype())


def leaves(params: Params, trainable: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=trainable) for k, v in params.items()}


def prefixed(params: Params, prefix: str) -> Params:
    """Sub-dict of entries under ``prefix``, with the prefix stripped."""
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def checksum(params: Params) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        arr = np.ascontiguousarray(params[k])
        h.update(k.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = ad.matmul(x, w)
    return ad.add_row(y, b) if b is not None else y


def joint_attention(
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    mask=None,
    heads: int = 1,
    wo: Tensor | None = None,
) -> Tensor:
    """Multi-head self-attention over one concatenated token sequence.

    Masked positions are dropped as keys for every query; their own output
    rows are still computed and are the caller's concern.
    """
    if mask is not None and len(mask) != x.shape[0]:
        raise DimensionError(f"attention mask length {len(mask)} vs sequence {x.shape[0]}")
    q, k, v = ad.matmul(x, wq), ad.matmul(x, wk), ad.matmul(x, wv)
    inner = q.shape[1]
    if inner % heads:
        raise DimensionError(f"width {inner} not divisible by {heads} heads")
    if mask is not None and not np.asarray(mask, dtype=bool).any():
        raise ContractError("attention: all keys masked")
    dh = inner // heads
    outs = []
    for h in range(heads):
        qh = ad.slice_cols(q, h * dh, (h + 1) * dh)
        kh = ad.slice_cols(k, h * dh, (h + 1) * dh)
        vh = ad.slice_cols(v, h * dh, (h + 1) * dh)
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(dh))
        outs.append(ad.matmul(ad.softmax_rows(scores, mask), vh))
    out = outs[0] if heads == 1 else ad.concat_cols(outs)
    return ad.matmul(out, wo) if wo is not None else out


def cross_attention(
    q_in: Tensor, kv_in: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, heads: int
) -> Tensor:
    q, k, v = ad.matmul(q_in, wq), ad.matmul(kv_in, wk), ad.matmul(kv_in, wv)
    dh = q.shape[1] // heads
    outs = []
    for h in range(heads):
        qh = ad.slice_cols(q, h * dh, (h + 1) * dh)
        kh = ad.slice_cols(k, h * dh, (h + 1) * dh)
        vh = ad.slice_cols(v, h * dh, (h + 1) * dh)
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(dh))
        outs.append(ad.matmul(ad.softmax_rows(scores), vh))
    out = outs[0] if heads == 1 else ad.concat_cols(outs)
    return ad.matmul(out, wo)


def sinusoidal_embedding(t: float, dim: int, max_period: float = 10000.0) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t * freqs
    emb = np.concatenate([np.cos(args), np.sin(args)])
    if dim % 2:
        emb = np.concatenate([emb, [0.0]])
    return emb.astype(ad.get_dtype())
