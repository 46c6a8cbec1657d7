"""Run configuration: model architecture, training recipe, data and evaluation knobs.

Configs are JSON objects with sections ``model``, ``train``, ``pretrain``,
``data`` and ``eval``; unknown fields are rejected by name. The config hash
covers the model section only, since that is what makes checkpoints
compatible.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .aligner import AlignerConfig
from .backbone import BackboneConfig
from .diffusion import Schedule, build_schedule
from .entity_vae import EntityConfig
from .errors import ConfigError
from .mllm import DEFAULT_TEMPLATE, TEMPLATE_VERSION, StubMLLMConfig, TeacherConfig

VISUAL_FEATS = ("vae", "mllm-vision")
TEXT_ENCODERS = ("unified", "teacher-only")
ALIGNER_INITS = ("pretrained", "random")


@dataclass(frozen=True)
class ModelConfig:
    width: int = 128
    depth: int = 4
    heads: int = 4
    K: int = 32
    M: int = 96
    frames: int = 8
    frame_size: int = 32
    vae_patch: int = 4
    c_lat: int = 8
    dit_patch: int = 2
    ref_size: int = 16
    aligner_layers: int = 2
    aligner_width: int = 64
    aligner_heads: int = 4
    mllm_width: int = 2048
    mllm_inner: int = 64
    mllm_layers: int = 2
    mllm_seed: int = 1234
    teacher_layers: int = 1
    teacher_seed: int = 4321
    T_diff: int = 50
    beta_min: float = 1e-3
    beta_max: float = 0.2
    visual_feats: str = "vae"
    text_encoder: str = "unified"
    visual_pos: str = "learned"
    template: str = DEFAULT_TEMPLATE
    template_version: str = TEMPLATE_VERSION

    def __post_init__(self):
        if self.visual_feats not in VISUAL_FEATS:
            raise ConfigError(f"model.visual_feats must be one of {VISUAL_FEATS}, got {self.visual_feats!r}")
        if self.text_encoder not in TEXT_ENCODERS:
            raise ConfigError(f"model.text_encoder must be one of {TEXT_ENCODERS}, got {self.text_encoder!r}")
        if self.frame_size % self.vae_patch or self.ref_size % self.vae_patch:
            raise ConfigError("model.frame_size and model.ref_size must be divisible by model.vae_patch")
        # Validate sub-configs eagerly so bad values fail at load time.
        self.aligner
        self.backbone
        self.schedule

    @classmethod
    def production(cls) -> "ModelConfig":
        """Production-scale sizes: 226 latent tokens, 6 x 768 x 8-head aligner."""
        return cls(K=226, aligner_layers=6, aligner_width=768, aligner_heads=8, T_diff=1000,
                   beta_min=1e-4, beta_max=2e-2)

    @property
    def entity(self) -> EntityConfig:
        return EntityConfig(patch=self.vae_patch, c_lat=self.c_lat)

    @property
    def mllm(self) -> StubMLLMConfig:
        return StubMLLMConfig(width=self.mllm_width, inner=self.mllm_inner, layers=self.mllm_layers,
                              image_size=self.ref_size, seed=self.mllm_seed)

    @property
    def teacher(self) -> TeacherConfig:
        return TeacherConfig(d=self.width, K=self.K, heads=self.heads, layers=self.teacher_layers,
                             seed=self.teacher_seed)

    @property
    def aligner(self) -> AlignerConfig:
        return AlignerConfig(layers=self.aligner_layers, width=self.aligner_width, heads=self.aligner_heads,
                             K=self.K, in_dim=self.mllm_width, out_dim=self.width)

    @property
    def backbone(self) -> BackboneConfig:
        lat = self.frame_size // self.vae_patch
        vis_in = self.c_lat if self.visual_feats == "vae" else self.mllm_width
        return BackboneConfig(depth=self.depth, width=self.width, heads=self.heads, t_emb=self.width,
                              frames=self.frames, lat_h=lat, lat_w=lat, lat_c=self.c_lat, patch=self.dit_patch,
                              K=self.K, M=self.M, vis_in=vis_in, visual_pos=self.visual_pos)

    @property
    def schedule(self) -> Schedule:
        return build_schedule(self.T_diff, self.beta_min, self.beta_max)

    @property
    def tokens_per_ref(self) -> int:
        g = self.ref_size // self.vae_patch
        if self.visual_feats == "vae":
            return g * g
        pooled = g // self.mllm.pool
        return pooled * pooled


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    steps: int = 2000
    base_lr: float = 1e-5
    warmup_steps: int = 100
    cycle_steps: int = 1000
    cycle_mult: float = 2.0
    lr_min_ratio: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.001
    adam_eps: float = 1e-8
    max_grad_norm: float = 1.0
    p_drop: float = 0.05
    per_ref_dropout: bool = False
    batch_size: int = 1
    grad_accum: int = 1
    checkpoint_every: int = 500
    aligner_init: str = "pretrained"
    aligner_aux_weight: float = 0.0
    vae_steps: int = 1500
    vae_lr: float = 1e-2
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    precision: str = "f64"

    def __post_init__(self):
        if self.aligner_init not in ALIGNER_INITS:
            raise ConfigError(f"train.aligner_init must be one of {ALIGNER_INITS}, got {self.aligner_init!r}")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ConfigError("train.p_drop must lie in [0, 1]")
        if self.batch_size != 1:
            raise ConfigError("train.batch_size other than 1 is not supported; use train.grad_accum")
        if self.grad_accum < 1:
            raise ConfigError("train.grad_accum must be >= 1")


@dataclass(frozen=True)
class PretrainSection:
    steps: int = 2000
    lr: float = 1e-3
    warmup_steps: int = 100
    cycle_steps: int = 1000
    cycle_mult: float = 2.0
    min_ratio: float = 0.01
    lam_mse: float = 1.0
    lam_cos: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class DataConfig:
    n_clips: int = 8
    seed: int = 7
    min_sprites: int = 1
    max_sprites: int = 3
    human_prob: float = 0.25
    static_prob: float = 0.15
    scenes_per_video: int = 2
    cut_threshold: float = 0.1
    motion_min: float = 0.002
    aesthetic_min: float = 0.1


@dataclass(frozen=True)
class EvalConfig:
    guidance: float = 3.0
    seed: int = 100
    n_clips: int = 16


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def desk(cls) -> "RunConfig":
        """Workstation overfitting recipe on the default desk model.

        The production lr (1e-5) barely moves a 2000-step run, and a narrow
        beta range leaves the low-t steps, which dominate the loss, nearly
        noise-free and hard to predict. A hotter lr and a wider beta range
        fit 8 clips well; one cosine cycle spans the whole run, so the last
        updates happen near the minimum lr instead of at a restart.
        """
        return cls().with_overrides(model={"beta_min": 5e-2, "beta_max": 0.5},
                                    train={"base_lr": 2e-3, "cycle_steps": 2000},
                                    pretrain={"cycle_steps": 2000})

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **sections) -> "RunConfig":
        """Replace fields per section, e.g. ``with_overrides(train={"steps": 10})``."""
        updated = {}
        for name, values in sections.items():
            current = getattr(self, name)
            updated[name] = _build(type(current), {**asdict(current), **values}, name)
        return dataclasses.replace(self, **updated)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "pretrain": PretrainSection, "data": DataConfig,
             "eval": EvalConfig}


def _build(cls, values: dict, section: str):
    names = {f.name: f for f in fields(cls)}
    for key in values:
        if key not in names:
            raise ConfigError(f"unknown config field '{section}.{key}'")
    typed = {}
    for key, val in values.items():
        default = getattr(cls(), key) if key in names else None
        if isinstance(default, bool) and not isinstance(val, bool):
            raise ConfigError(f"config field '{section}.{key}' must be a boolean")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"config field '{section}.{key}' must be numeric")
            if isinstance(default, int) and not isinstance(default, bool) and float(val) != int(val):
                raise ConfigError(f"config field '{section}.{key}' must be an integer")
            val = type(default)(val)
        if isinstance(default, str) and not isinstance(val, str):
            raise ConfigError(f"config field '{section}.{key}' must be a string")
        typed[key] = val
    try:
        return cls(**typed)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{section}' section: {exc}") from exc


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    for key in d:
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config section '{key}'")
    parts = {}
    for name, cls in _SECTIONS.items():
        sec = d.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"config section '{name}' must be an object")
        parts[name] = _build(cls, sec, name)
    return RunConfig(**parts)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(d)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(model: ModelConfig) -> str:
    return hashlib.sha256(canonical_json(asdict(model)).encode()).hexdigest()
