"""Synthetic dataset generation (raw multi-shot videos -> curated clips) and loading."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import curation as cu
from .config import DataConfig, ModelConfig
from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass
class Example:
    clip_id: str
    caption: str
    refs: list[tuple[str, np.ndarray]]  # (label, ref_size x ref_size straight RGBA)
    kinds: list[str]
    frames: np.ndarray  # (F, H, W, 3)
    ground_truth: dict = field(default_factory=dict)


@dataclass
class SynthSummary:
    raw_videos: int = 0
    shots: int = 0
    rejected_filter: int = 0
    rejected_seam: int = 0
    written: int = 0
    clip_ids: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _scene(rng: np.random.Generator, data: DataConfig, model: ModelConfig) -> cu.SynthClip:
    n = int(rng.integers(data.min_sprites, data.max_sprites + 1))
    static = bool(rng.random() < data.static_prob)
    for _ in range(20):
        specs = cu.random_specs(rng, n, model.frames, model.frame_size, human_prob=data.human_prob, static=static)
        try:
            return cu.synth_clip(specs, model.frames, model.frame_size, rng)
        except cu.PlacementError:
            continue
    raise cu.PlacementError(f"could not place {n} sprites in a {model.frame_size}px frame")


def synthesize_dataset(out_dir: str | Path, data: DataConfig, model: ModelConfig, n_clips: int | None = None,
                       seed: int | None = None) -> SynthSummary:
    """Render multi-shot raw videos, cut them at detected seams, filter, extract refs.

    Writes ``videos/<id>/`` frame folders, ``refs/*.png`` and
    ``manifests/<id>.json`` under ``out_dir`` until ``n_clips`` clips pass.
    """
    out = Path(out_dir)
    n_clips = data.n_clips if n_clips is None else n_clips
    if n_clips < 1:
        raise ConfigError("data.n_clips must be >= 1")
    rng = np.random.default_rng(data.seed if seed is None else seed)
    summary = SynthSummary()
    while summary.written < n_clips:
        if summary.raw_videos > 50 * n_clips:
            raise ConfigError("filters reject nearly every synthetic clip; lower data.motion_min/aesthetic_min")
        scenes = [_scene(rng, data, model) for _ in range(data.scenes_per_video)]
        raw = np.concatenate([s.frames for s in scenes])
        summary.raw_videos += 1
        cuts = cu.detect_scene_changes(raw, data.cut_threshold)
        segments = cu.split_at_cuts(len(raw), cuts)
        expected = [(i * model.frames, (i + 1) * model.frames) for i in range(len(scenes))]
        summary.shots += len(segments)
        if segments != expected:
            summary.rejected_seam += len(segments)
            continue
        kept, scores = cu.filter_clips([raw[a:b] for a, b in segments], data.motion_min, data.aesthetic_min)
        summary.rejected_filter += len(segments) - len(kept)
        for i in kept:
            if summary.written >= n_clips:
                break
            clip = scenes[i]
            clip_id = f"clip{summary.written:04d}"
            video_rel = f"videos/{clip_id}"
            cu.write_video(out / video_rel, clip.frames)
            prov = {"generator": "synthetic-sprites", "raw_video": summary.raw_videos - 1, "shot": i,
                    "motion_score": scores[i].motion_score, "aesthetic_score": scores[i].aesthetic_score}
            man = cu.extract_references(clip, out, clip_id, provenance=prov, video_rel=video_rel)
            man.extra["ground_truth"] = {"background": clip.background, "sprites": [s.to_dict() for s in clip.specs],
                                         "frames": model.frames, "size": model.frame_size}
            cu.write_manifest(out / "manifests" / f"{clip_id}.json", man)
            summary.written += 1
            summary.clip_ids.append(clip_id)
    cu._atomic_write_text(out / "summary.json", json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n")
    return summary


def manifest_paths(data_dir: str | Path) -> list[Path]:
    paths = sorted((Path(data_dir) / "manifests").glob("*.json"))
    if not paths:
        raise ConfigError(f"no manifests found under {Path(data_dir) / 'manifests'}")
    return paths


def load_example(manifest_path: str | Path, model: ModelConfig) -> Example:
    path = Path(manifest_path)
    man = cu.read_manifest(path, check_assets=True)
    root = path.parent.parent
    frames = cu.read_video(root / man.video)
    want = (model.frames, model.frame_size, model.frame_size, 3)
    if frames.shape != want:
        raise ConfigError(f"{path}: video shape {frames.shape} does not match model config {want}")
    refs, kinds = [], []
    for r in man.references:
        img = cu.straight_alpha(cu.read_png(root / r.asset))
        refs.append((r.label, cu.ref_canvas(img, model.ref_size)))
        kinds.append(r.kind)
    return Example(man.clip_id, man.caption, refs, kinds, frames, man.extra.get("ground_truth", {}))


def load_examples(data_dir: str | Path, model: ModelConfig, limit: int | None = None) -> list[Example]:
    paths = manifest_paths(data_dir)
    return [load_example(p, model) for p in paths[:limit]]
