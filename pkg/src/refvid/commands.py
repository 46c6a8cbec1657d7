"""Command implementations behind the CLI; each writes a run record into its output directory."""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from . import curation as cu
from . import nn
from .aligner import PretrainConfig, pretrain_aligner
from .checkpoint import IncompatibleCheckpointError, file_sha256, load_checkpoint
from .config import RunConfig, config_from_dict, config_hash
from .dataset import Example, load_example, load_examples, manifest_paths, synthesize_dataset
from .evaluation import ClipResult, EvalReport, compare, prompt_follow, read_report, subject_consistency, write_report
from .errors import ConfigError
from .pipeline import Conditioner, sample_video, slot_label
from .trainer import load_aligner_checkpoint, run_training, save_aligner_checkpoint, state_from_manifest

log = logging.getLogger(__name__)


def write_run_record(out: Path, record: dict) -> None:
    cu._atomic_write_text(out / "run.json", json.dumps(record, indent=2, sort_keys=True) + "\n")


def cmd_synth(cfg: RunConfig, out: str | Path) -> dict:
    out = Path(out)
    summary = synthesize_dataset(out, cfg.data, cfg.model)
    info = summary.to_dict()
    write_run_record(out, {"command": "synth", "config": cfg.to_dict(), "summary": info})
    return info


def aligner_pairs(cfg: RunConfig, examples: list[Example]) -> list[tuple[np.ndarray, np.ndarray]]:
    """(MLLM hidden states, teacher features) per clip, plus the empty-condition pair."""
    cond = Conditioner(cfg.model, None)
    pairs = []
    for ex in examples:
        slots = [(slot_label(lab, k), img) for (lab, img), k in zip(ex.refs, ex.kinds)]
        pairs.append((cond.hidden(ex.caption, slots), cond.teacher_features(ex.caption)))
    pairs.append((cond.hidden("", []), cond.teacher_features("")))
    return pairs


def cmd_align_pretrain(cfg: RunConfig, data_dir: str | Path, out: str | Path) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    examples = load_examples(data_dir, cfg.model)
    pc = cfg.pretrain
    opt = PretrainConfig(steps=pc.steps, lr=pc.lr, warmup_steps=pc.warmup_steps, cycle_steps=pc.cycle_steps,
                         cycle_mult=pc.cycle_mult, min_ratio=pc.min_ratio, lam_mse=pc.lam_mse, lam_cos=pc.lam_cos,
                         seed=pc.seed)
    res = pretrain_aligner(aligner_pairs(cfg, examples), cfg.model.aligner, opt, log_path=out / "loss.csv")
    digest = save_aligner_checkpoint(out / "aligner.ckpt", res.params, cfg, res.curve)
    info = {"command": "align-pretrain", "config": cfg.to_dict(), "checkpoint": "aligner.ckpt",
            "checkpoint_sha256": digest, "final_loss_total": res.curve[-1]["loss_total"], "steps": len(res.curve)}
    write_run_record(out, info)
    return info


def cmd_train(cfg: RunConfig, data_dir: str | Path, out: str | Path, aligner_ckpt: str | Path | None = None,
              resume: str | Path | None = None) -> dict:
    out = Path(out)
    examples = load_examples(data_dir, cfg.model)
    aligner_params = None
    needs_aligner = cfg.model.text_encoder == "unified" and cfg.train.aligner_init == "pretrained" and resume is None
    if needs_aligner:
        if aligner_ckpt is None:
            raise ConfigError("--aligner-init pretrained requires --aligner-ckpt (or use --aligner-init random)")
        aligner_params = load_aligner_checkpoint(aligner_ckpt, cfg)
    state, final = run_training(cfg, examples, out, aligner_params, resume)
    tail = [r["loss"] for r in state.history[-50:]]
    return {"checkpoint": str(final), "steps": state.step, "final_loss_mean50": float(np.mean(tail)) if tail else None}


def load_for_inference(ckpt: str | Path, cfg: RunConfig | None = None) -> tuple[RunConfig, object, str]:
    """(config stored in the checkpoint, train state, file sha256); ``cfg`` must match if given."""
    man = load_checkpoint(ckpt)
    stored = config_from_dict(man.meta["config"])
    if cfg is not None and config_hash(cfg.model) != man.config_hash:
        raise IncompatibleCheckpointError(f"{ckpt}: checkpoint was trained with a different model config")
    if config_hash(stored.model) != man.config_hash:
        raise IncompatibleCheckpointError(f"{ckpt}: stored config does not match its hash")
    return stored, state_from_manifest(man), file_sha256(ckpt)


def _sample_example(cond: Conditioner, params: nn.Params, ex: Example, seed: int, g: float) -> np.ndarray:
    _, frames = sample_video(cond, params, ex.caption, ex.refs, ex.kinds, seed, g)
    return frames


def cmd_sample(ckpt: str | Path, manifest: str | Path, out: str | Path, seed: int, guidance: float,
               cfg: RunConfig | None = None) -> dict:
    out = Path(out)
    stored, state, digest = load_for_inference(ckpt, cfg)
    ex = load_example(manifest, stored.model)
    cond = Conditioner(stored.model, state.frozen)
    frames = _sample_example(cond, state.params, ex, seed, guidance)
    cu.write_video(out / "frames", frames)
    info = {"command": "sample", "checkpoint_sha256": digest, "config_hash": config_hash(stored.model),
            "manifest": str(manifest), "clip_id": ex.clip_id, "caption": ex.caption, "seed": seed,
            "guidance": guidance, "frames": int(frames.shape[0])}
    write_run_record(out, info)
    return info


def evaluate_checkpoint(ckpt: str | Path, examples: list[Example], seed: int, guidance: float,
                        run_name: str = "", frames_dir: Path | None = None, cfg: RunConfig | None = None) -> EvalReport:
    stored, state, digest = load_for_inference(ckpt, cfg)
    cond = Conditioner(stored.model, state.frozen)
    clips = []
    for i, ex in enumerate(sorted(examples, key=lambda e: e.clip_id)):
        s = seed + i
        frames = _sample_example(cond, state.params, ex, s, guidance)
        if frames_dir is not None:
            cu.write_video(frames_dir / ex.clip_id, frames)
        scores = {f"{k}:{lab}": subject_consistency(frames, img) for (lab, img), k in zip(ex.refs, ex.kinds)}
        sprites = {sp["label"]: sp for sp in ex.ground_truth.get("sprites", [])}
        tracked = [(img, sprites[lab]) for (lab, img), k in zip(ex.refs, ex.kinds) if k != "Face" and lab in sprites]
        pf = prompt_follow(frames, [a for a, _ in tracked], [b for _, b in tracked]) if tracked else 0.0
        clips.append(ClipResult(ex.clip_id, s, scores, float(np.mean(list(scores.values()))), pf))
    return EvalReport(digest, config_hash(stored.model), seed, guidance, clips, run_name).finalize()


def cmd_eval(ckpt: str | Path, data_dir: str | Path, out: str | Path, seed: int, guidance: float,
             n_clips: int | None = None, baseline: str | Path | None = None, run_name: str = "",
             cfg: RunConfig | None = None) -> EvalReport:
    out = Path(out)
    stored = config_from_dict(load_checkpoint(ckpt).meta["config"])
    paths = manifest_paths(data_dir)[:n_clips]
    examples = [load_example(p, stored.model) for p in paths]
    if not examples:
        raise ConfigError("evaluation set is empty")
    report = evaluate_checkpoint(ckpt, examples, seed, guidance, run_name, out / "frames", cfg)
    if baseline is not None:
        report.baseline = compare(report, read_report(baseline), str(baseline))
    write_report(out / "report.json", report)
    write_run_record(out, {"command": "eval", "checkpoint_sha256": report.checkpoint_sha256,
                           "config_hash": report.config_hash, "seed": seed, "guidance": guidance,
                           "data": str(data_dir), "clips": [c.clip_id for c in report.clips],
                           "baseline": str(baseline) if baseline else None})
    return report

