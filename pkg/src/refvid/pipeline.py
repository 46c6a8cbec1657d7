"""Glue between frozen encoders, the entity autoencoder, the aligner and the backbone.

Model parameters live in one flat dict with prefixes: ``aligner.`` and
``backbone.`` are trainable, ``vae.`` is fitted once and then frozen, and
``norm.shift`` / ``norm.scale`` standardize video latents.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import aligner as al
from . import backbone as bb
from . import entity_vae as ev
from . import nn
from .autodiff import Tensor
from .config import ModelConfig
from .diffusion import ddpm_sample, guided
from .mllm import StubMLLM, StubTeacher, build_instruction

TRAINABLE = ("aligner.", "backbone.")


def init_model(model: ModelConfig, rng: np.random.Generator, aligner_params: nn.Params | None = None) -> nn.Params:
    """Fresh trainable parameters; ``aligner_params`` (unprefixed) overrides the aligner init."""
    params: nn.Params = {}
    a = aligner_params if aligner_params is not None else al.init_params(model.aligner, rng)
    params.update({f"aligner.{k}": np.array(v) for k, v in a.items()})
    params.update({f"backbone.{k}": v for k, v in bb.init_params(model.backbone, rng).items()})
    if model.text_encoder == "teacher-only":
        params = {k: v for k, v in params.items() if not k.startswith("aligner.")}
    return params


def fit_latent_norm(vae: nn.Params, videos: Sequence[np.ndarray], model: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and one global std of the video latents."""
    z = np.stack([ev.encode_video(vae, v, model.entity) for v in videos])
    shift = z.reshape(-1, model.c_lat).mean(axis=0)
    scale = np.array(float((z - shift).std()) or 1.0)
    return shift, scale


@dataclass
class FrozenParts:
    vae: nn.Params
    shift: np.ndarray
    scale: np.ndarray

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {f"vae.{k}": v for k, v in self.vae.items()}
        out["norm.shift"] = self.shift
        out["norm.scale"] = self.scale
        return out

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "FrozenParts":
        return cls(nn.prefixed(t, "vae."), t["norm.shift"], t["norm.scale"])


def _img_key(img: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(img).tobytes(), digest_size=12).hexdigest()


def slot_label(label: str, kind: str) -> str:
    return f"{label} face" if kind == "Face" else label


class Conditioner:
    """Builds unified conditions; frozen encoder outputs are cached per input."""

    def __init__(self, model: ModelConfig, frozen: FrozenParts, mllm: StubMLLM | None = None,
                 teacher: StubTeacher | None = None):
        self.model = model
        self.frozen = frozen
        self.mllm = mllm or StubMLLM(model.mllm)
        self.teacher = teacher or StubTeacher(model.teacher)
        self._hidden: dict[tuple, np.ndarray] = {}
        self._teacher: dict[str, np.ndarray] = {}
        self._visual: dict[str, np.ndarray] = {}

    def hidden(self, caption: str, refs: Sequence[tuple[str, np.ndarray]]) -> np.ndarray:
        key = (caption, tuple((lab, _img_key(img)) for lab, img in refs))
        if key not in self._hidden:
            instr = build_instruction(caption, refs, self.model.template, self.model.template_version)
            self._hidden[key] = self.mllm.encode(instr).tokens
        return self._hidden[key]

    def teacher_features(self, caption: str) -> np.ndarray:
        if caption not in self._teacher:
            self._teacher[caption] = self.teacher.encode(caption).tokens
        return self._teacher[caption]

    def visual_grid(self, img: np.ndarray) -> np.ndarray:
        key = _img_key(img)
        if key not in self._visual:
            if self.model.visual_feats == "vae":
                g = ev.encode_entity(self.frozen.vae, img, self.model.entity).grid
                self._visual[key] = (g - self.frozen.shift) / self.frozen.scale
            else:
                f = self.mllm.vision_features(img)
                n = int(round(np.sqrt(f.shape[0])))
                self._visual[key] = f.reshape(n, n, f.shape[1])
        return self._visual[key]

    def build(self, p: dict[str, Tensor], caption: str, refs: Sequence[tuple[str, np.ndarray]],
              kinds: Sequence[str] | None = None) -> bb.UnifiedFeatures:
        """Unified condition (K text rows + M visual rows) from caption and references.

        An empty caption with no references is the unconditional exemplar.
        """
        kinds = list(kinds) if kinds is not None else ["Obj"] * len(refs)
        slots = [(slot_label(lab, k), img) for (lab, img), k in zip(refs, kinds)]
        if self.model.text_encoder == "unified":
            a = {k[len("aligner."):]: v for k, v in p.items() if k.startswith("aligner.")}
            f_text = al.align_tensor(a, self.hidden(caption, slots), self.model.aligner)
        else:
            f_text = Tensor(self.teacher_features(caption))
        lats = [ev.EntityLatent(self.visual_grid(img), lab) for lab, img in slots]
        vis = ev.flatten_pad(lats, self.model.M, proj=p["backbone.vis_proj"])
        return bb.concat_unified(f_text, vis)

    def denoise(self, p: dict[str, Tensor], x_t: np.ndarray, t: int, cond: bb.UnifiedFeatures) -> Tensor:
        b = {k[len("backbone."):]: v for k, v in p.items() if k.startswith("backbone.")}
        return bb.denoise_tensor(b, x_t, t, cond, self.model.backbone)

    def encode_video_latent(self, frames: np.ndarray) -> np.ndarray:
        z = ev.encode_video(self.frozen.vae, frames, self.model.entity)
        return (z - self.frozen.shift) / self.frozen.scale

    def decode_video_latent(self, x: np.ndarray) -> np.ndarray:
        z = x * self.frozen.scale + self.frozen.shift
        return ev.decode_video(self.frozen.vae, z, self.model.entity)


def sample_video(cond: Conditioner, params: nn.Params, caption: str, refs, kinds, seed: int,
                 guidance: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
    """Classifier-free guided ancestral sampling; returns (latent, RGB frames in [0, 1])."""
    p = nn.leaves(params, False)
    c = cond.build(p, caption, refs, kinds)
    u = cond.build(p, "", [], [])

    def denoiser(x, t, ci):
        return cond.denoise(p, x, t, ci).data

    rng = np.random.default_rng(seed)
    x = ddpm_sample(guided(denoiser, c, u, guidance), None, cond.model.schedule, cond.model.backbone.latent_shape, rng)
    return x, cond.decode_video_latent(x)


def aligner_subset(params: nn.Params) -> nn.Params:
    return nn.prefixed(params, "aligner.")

