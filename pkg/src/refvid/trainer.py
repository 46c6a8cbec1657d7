"""Joint aligner + backbone training with condition dropout, checkpoints and resume."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import aligner as al
from . import autodiff as ad
from . import entity_vae as ev
from . import nn
from .checkpoint import CheckpointManifest, load_checkpoint, save_checkpoint
from .config import RunConfig, canonical_json, config_hash
from .dataset import Example
from .diffusion import diffusion_loss, forward_noise, sample_timesteps
from .errors import ConfigError, DivergenceError, IntegrityError
from .optim import LrSchedule, OptimizerState, adamw_step, clip_grad_norm, lr_at
from .pipeline import Conditioner, FrozenParts, fit_latent_norm, init_model

__all__ = [
    "adamw_step", "lr_at", "clip_grad_norm", "LrSchedule", "OptimizerState", "drop_condition", "TrainState",
    "prepare_frozen", "init_state", "train_loop", "dataset_loss", "save_train_checkpoint", "load_train_checkpoint", "run_training",
]

log = logging.getLogger(__name__)

RNG_STREAMS = ("data", "dropout", "timestep", "noise")
METRIC_FIELDS = ["step", "loss", "grad_norm", "lr", "t", "dropped", "clip_id"]


def drop_condition(refs: Sequence, caption: str, p: float, rng: np.random.Generator) -> tuple[list, str]:
    """With probability ``p`` return ``([], "")``; one uniform draw per call regardless of ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1], got {p}")
    if rng.random() < p:
        return [], ""
    return list(refs), caption


def drop_references(refs: Sequence, caption: str, p: float, rng: np.random.Generator) -> tuple[list, str]:
    """Per-reference variant: the caption and each reference are dropped independently."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1], got {p}")
    draws = rng.random(len(refs) + 1)
    kept = [r for r, d in zip(refs, draws[1:]) if d >= p]
    return kept, ("" if draws[0] < p else caption)


def make_rngs(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(RNG_STREAMS, children)}


@dataclass
class TrainState:
    params: nn.Params
    opt: OptimizerState
    frozen: FrozenParts
    rngs: dict[str, np.random.Generator]
    step: int = 0
    first_loss: float | None = None
    bad_steps: int = 0
    history: list[dict] = field(default_factory=list)


def prepare_frozen(cfg: RunConfig, examples: Sequence[Example]) -> FrozenParts:
    """Fit the entity autoencoder on clip frames and reference crops, then the latent standardizer."""
    images = [f for ex in examples for f in ex.frames] + [img for ex in examples for _, img in ex.refs]
    vae, _ = ev.fit(images, cfg.model.entity, steps=cfg.train.vae_steps, lr=cfg.train.vae_lr, seed=cfg.train.seed)
    shift, scale = fit_latent_norm(vae, [ex.frames for ex in examples], cfg.model)
    return FrozenParts(vae, shift, scale)


def init_state(cfg: RunConfig, frozen: FrozenParts, aligner_params: nn.Params | None = None) -> TrainState:
    if cfg.model.text_encoder == "unified" and cfg.train.aligner_init == "pretrained" and aligner_params is None:
        raise ConfigError("train.aligner_init is 'pretrained' but no aligner checkpoint was given")
    if cfg.train.aligner_init == "random":
        aligner_params = None
    rng = np.random.default_rng(np.random.SeedSequence([cfg.train.seed, 1]))
    params = init_model(cfg.model, rng, aligner_params)
    return TrainState(params, OptimizerState(), frozen, make_rngs(cfg.train.seed))


def _lr_schedule(cfg: RunConfig) -> LrSchedule:
    t = cfg.train
    return LrSchedule(t.base_lr, t.warmup_steps, t.cycle_steps, t.cycle_mult, t.lr_min_ratio)


def train_step(state: TrainState, cfg: RunConfig, examples: Sequence[Example], latents: dict[str, np.ndarray],
               cond: Conditioner) -> dict:
    """One optimizer step (``grad_accum`` micro-batches of one clip each); mutates ``state``."""
    tc = cfg.train
    sched = cfg.model.schedule
    leaves = nn.leaves(state.params)
    acc: dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in state.params.items()}
    losses, info = [], {}
    for _ in range(tc.grad_accum):
        ex = examples[int(state.rngs["data"].integers(len(examples)))]
        pairs = list(zip(ex.refs, ex.kinds))
        dropper = drop_references if tc.per_ref_dropout else drop_condition
        pairs, caption = dropper(pairs, ex.caption, tc.p_drop, state.rngs["dropout"])
        dropped = not pairs and caption == ""
        t = sample_timesteps(1, sched, state.rngs["timestep"])[0]
        eps = state.rngs["noise"].standard_normal(cfg.model.backbone.latent_shape)
        x_t = forward_noise(latents[ex.clip_id], eps, t, sched)
        leaves = nn.leaves(state.params)
        c = cond.build(leaves, caption, [r for r, _ in pairs], [k for _, k in pairs])
        loss = diffusion_loss(cond.denoise(leaves, x_t, t, c), eps)
        if tc.aligner_aux_weight > 0 and cfg.model.text_encoder == "unified":
            f_text = ad.slice_rows(c.tokens, 0, c.K)
            aux = al.loss_total(f_text, cond.teacher_features(caption))
            loss = ad.add(loss, ad.scale(aux, tc.aligner_aux_weight))
        ad.backward(loss)
        for k, v in leaves.items():
            if v.grad is not None:
                acc[k] += v.grad
        losses.append(loss.item())
        info = {"t": t, "dropped": int(dropped), "clip_id": ex.clip_id}
    if tc.grad_accum > 1:
        acc = {k: g / tc.grad_accum for k, g in acc.items()}
    grads, gnorm = clip_grad_norm(acc, tc.max_grad_norm)
    lr = lr_at(state.opt.step + 1, _lr_schedule(cfg))
    state.params, state.opt = adamw_step(state.params, grads, state.opt, lr, tc.beta1, tc.beta2, tc.weight_decay,
                                         tc.adam_eps)
    row = {"step": state.step, "loss": float(np.mean(losses)), "grad_norm": gnorm, "lr": lr, **info}
    state.step += 1
    return row


def dataset_loss(state: TrainState, cfg: RunConfig, examples: Sequence[Example], cond: Conditioner | None = None,
                 n_t: int = 10, seed: int = 0) -> float:
    """Conditional diffusion loss averaged over every clip and ``n_t`` evenly spaced timesteps.

    Noise comes from a dedicated generator, so the value is a deterministic
    function of the parameters and far less noisy than the per-step loss.
    """
    cond = cond or Conditioner(cfg.model, state.frozen)
    sched = cfg.model.schedule
    ts = np.unique(np.linspace(1, sched.T_diff, n_t).round().astype(int))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    p = nn.leaves(state.params, False)
    vals = []
    for ex in sorted(examples, key=lambda e: e.clip_id):
        x0 = cond.encode_video_latent(ex.frames)
        c = cond.build(p, ex.caption, ex.refs, ex.kinds)
        for t in ts:
            eps = rng.standard_normal(x0.shape)
            vals.append(diffusion_loss(cond.denoise(p, forward_noise(x0, eps, int(t), sched), int(t), c), eps).item())
    return float(np.mean(vals))


def _guard(state: TrainState, loss: float, cfg: RunConfig) -> None:
    if state.first_loss is None:
        state.first_loss = loss
    state.bad_steps = state.bad_steps + 1 if loss > cfg.train.divergence_factor * state.first_loss else 0
    if state.bad_steps >= cfg.train.divergence_patience:
        raise DivergenceError(f"training diverged at step {state.step}: loss {loss:.4g} vs initial {state.first_loss:.4g}")


def train_loop(
    cfg: RunConfig,
    examples: Sequence[Example],
    state: TrainState,
    cond: Conditioner | None = None,
    until: int | None = None,
    out_dir: str | Path | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainState:
    """Run optimizer steps from ``state.step`` up to ``until`` (default ``train.steps``).

    With ``out_dir`` set, metrics are appended to ``metrics.csv`` and a
    checkpoint is written every ``checkpoint_every`` steps. The frozen
    encoders are checksummed before and after.
    """
    if not examples:
        raise ConfigError("training needs at least one example")
    until = cfg.train.steps if until is None else until
    cond = cond or Conditioner(cfg.model, state.frozen)
    before = (cond.mllm.checksum(), cond.teacher.checksum(), nn.checksum(state.frozen.vae))
    latents = {ex.clip_id: cond.encode_video_latent(ex.frames) for ex in examples}
    out = Path(out_dir) if out_dir is not None else None
    fh = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        path = out / "metrics.csv"
        new = not path.exists()
        fh = open(path, "a", newline="")
        writer = csv.DictWriter(fh, METRIC_FIELDS)
        if new:
            writer.writeheader()
    try:
        while state.step < until:
            row = train_step(state, cfg, examples, latents, cond)
            state.history.append(row)
            if writer:
                writer.writerow(row)
                fh.flush()
            if on_step:
                on_step(row)
            _guard(state, row["loss"], cfg)
            every = cfg.train.checkpoint_every
            if out is not None and every and state.step % every == 0:
                save_train_checkpoint(out / f"step_{state.step:06d}.ckpt", state, cfg)
    finally:
        if fh:
            fh.close()
    after = (cond.mllm.checksum(), cond.teacher.checksum(), nn.checksum(state.frozen.vae))
    if before != after:
        raise IntegrityError("a frozen module changed during training")
    return state


def _rng_state(g: np.random.Generator) -> dict:
    return g.bit_generator.state


def _restore_rng(st: dict) -> np.random.Generator:
    bg = getattr(np.random, st["bit_generator"])()
    bg.state = st
    return np.random.Generator(bg)


def save_train_checkpoint(path: str | Path, state: TrainState, cfg: RunConfig) -> str:
    tensors = {f"param/{k}": v for k, v in state.params.items()}
    tensors.update({f"opt.m/{k}": v for k, v in state.opt.m.items()})
    tensors.update({f"opt.v/{k}": v for k, v in state.opt.v.items()})
    tensors.update(state.frozen.to_tensors())
    meta = {
        "kind": "train",
        "step": state.step,
        "opt_step": state.opt.step,
        "rngs": {k: _rng_state(g) for k, g in state.rngs.items()},
        "first_loss": state.first_loss,
        "bad_steps": state.bad_steps,
        "config": cfg.to_dict(),
    }
    return save_checkpoint(path, tensors, config_hash(cfg.model), meta)


def state_from_manifest(man: CheckpointManifest) -> TrainState:
    if man.meta.get("kind") != "train":
        raise ConfigError(f"expected a training checkpoint, got kind {man.meta.get('kind')!r}")
    t = man.tensors
    params = {k[len("param/"):]: v.copy() for k, v in t.items() if k.startswith("param/")}
    m = {k[len("opt.m/"):]: v.copy() for k, v in t.items() if k.startswith("opt.m/")}
    v = {k[len("opt.v/"):]: v.copy() for k, v in t.items() if k.startswith("opt.v/")}
    frozen = FrozenParts.from_tensors({k: a.copy() for k, a in t.items() if k.startswith(("vae.", "norm."))})
    rngs = {k: _restore_rng(s) for k, s in man.meta["rngs"].items()}
    return TrainState(params, OptimizerState(m, v, man.meta["opt_step"]), frozen, rngs, man.meta["step"],
                      man.meta.get("first_loss"), man.meta.get("bad_steps", 0))


def load_train_checkpoint(path: str | Path, cfg: RunConfig | None = None) -> TrainState:
    man = load_checkpoint(path, None if cfg is None else config_hash(cfg.model))
    return state_from_manifest(man)


def save_aligner_checkpoint(path: str | Path, params: nn.Params, cfg: RunConfig, curve: list[dict]) -> str:
    meta = {"kind": "aligner", "aligner": asdict(cfg.model.aligner), "pretrain": asdict(cfg.pretrain),
            "final_loss": curve[-1]["loss_total"] if curve else None}
    return save_checkpoint(path, {f"aligner/{k}": v for k, v in params.items()}, aligner_hash(cfg), meta)


def aligner_hash(cfg: RunConfig) -> str:
    import hashlib

    payload = {"aligner": asdict(cfg.model.aligner), "mllm": asdict(cfg.model.mllm),
               "teacher": asdict(cfg.model.teacher), "template": cfg.model.template}
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()


def load_aligner_checkpoint(path: str | Path, cfg: RunConfig) -> nn.Params:
    man = load_checkpoint(path, aligner_hash(cfg))
    if man.meta.get("kind") != "aligner":
        raise ConfigError(f"{path} is not an aligner checkpoint")
    return {k[len("aligner/"):]: v.copy() for k, v in man.tensors.items()}


def run_training(cfg: RunConfig, examples: Sequence[Example], out_dir: str | Path,
                 aligner_params: nn.Params | None = None, resume: str | Path | None = None,
                 on_step: Callable[[dict], None] | None = None) -> tuple[TrainState, Path]:
    """Fit frozen parts (or resume), train, and write ``final.ckpt`` plus a run record."""
    out = Path(out_dir)
    if resume is not None:
        state = load_train_checkpoint(resume, cfg)
    else:
        state = init_state(cfg, prepare_frozen(cfg, examples), aligner_params)
    state = train_loop(cfg, examples, state, out_dir=out, on_step=on_step)
    final = out / "final.ckpt"
    digest = save_train_checkpoint(final, state, cfg)
    record = {"command": "train", "config": cfg.to_dict(), "config_hash": config_hash(cfg.model),
              "checkpoint": final.name, "checkpoint_sha256": digest, "steps": state.step,
              "clips": [ex.clip_id for ex in examples], "resumed_from": str(resume) if resume else None}
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return state, final
