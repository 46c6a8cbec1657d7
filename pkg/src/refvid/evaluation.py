"""Subject-consistency and prompt-follow metrics, eval reports and paired comparisons."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import binomtest

from .errors import ConfigError, ContractError, ManifestError, NumericError

REPORT_VERSION = 1
HIST_BINS = 4
OPAQUE = 0.5


class DegenerateReferenceError(NumericError):
    """Normalized cross-correlation is undefined for a uniform reference."""


def _opaque_patch(ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Tight crop of the reference: (rgb h x w x 3, bool mask h x w)."""
    ref = np.asarray(ref, dtype=np.float64)
    if ref.ndim != 3 or ref.shape[2] != 4:
        raise ContractError(f"reference must be H x W x 4 RGBA, got {ref.shape}")
    m = ref[..., 3] > OPAQUE
    if not m.any():
        raise ContractError("reference has no opaque pixels")
    rows, cols = np.nonzero(m.any(axis=1))[0], np.nonzero(m.any(axis=0))[0]
    sl = (slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1))
    return ref[sl][..., :3], m[sl]


def color_histogram(pixels: np.ndarray, bins: int = HIST_BINS) -> np.ndarray:
    """Normalized joint RGB histogram of an (n, 3) pixel array."""
    idx = np.clip((np.asarray(pixels) * bins).astype(int), 0, bins - 1)
    flat = (idx[:, 0] * bins + idx[:, 1]) * bins + idx[:, 2]
    h = np.bincount(flat, minlength=bins ** 3).astype(np.float64)
    return h / h.sum()


def histogram_intersection(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.minimum(a, b).sum())


def match_reference(frame: np.ndarray, ref: np.ndarray) -> tuple[float, tuple[int, int], np.ndarray]:
    """Best window by NCC of the opaque-pixel RGB vector.

    Returns (ncc, (row, col) of the window's top-left, matched pixels n x 3).
    """
    rgb, m = _opaque_patch(ref)
    h, w = m.shape
    frame = np.asarray(frame, dtype=np.float64)[..., :3]
    if frame.shape[0] < h or frame.shape[1] < w:
        raise ContractError(f"reference {h}x{w} larger than frame {frame.shape[:2]}")
    if np.ptp(rgb[m], axis=0).max() < 1e-12:
        raise DegenerateReferenceError("reference opaque region is one flat colour; NCC is undefined")
    r = rgb[m].reshape(-1)
    r = r - r.mean()
    rn = np.linalg.norm(r)
    win = sliding_window_view(frame, (h, w, 3))[:, :, 0]  # (nh, nw, h, w, 3)
    nh, nw = win.shape[:2]
    pix = win[:, :, m, :].reshape(nh * nw, -1)
    pix_c = pix - pix.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(pix_c, axis=1)
    ncc = np.where(norms > 1e-12, pix_c @ r / np.maximum(norms, 1e-12) / rn, 0.0)
    best = int(np.argmax(ncc))
    pos = (best // nw, best % nw)
    return float(ncc[best]), pos, pix[best].reshape(-1, 3)


def subject_consistency(video: np.ndarray, ref: np.ndarray) -> float:
    """Mean over frames of 0.5 * histogram intersection + 0.5 * max(0, NCC), in [0, 1]."""
    video = np.asarray(video, dtype=np.float64)
    if video.ndim != 4:
        raise ContractError(f"video must be F x H x W x 3, got {video.shape}")
    rgb, m = _opaque_patch(ref)
    href = color_histogram(rgb[m])
    scores = []
    for frame in video:
        ncc, _, pix = match_reference(frame, ref)
        scores.append(0.5 * histogram_intersection(href, color_histogram(pix)) + 0.5 * max(0.0, ncc))
    return float(np.clip(np.mean(scores), 0.0, 1.0))


def _track(video: np.ndarray, ref: np.ndarray) -> tuple[tuple[int, int], tuple[int, int]]:
    _, first, _ = match_reference(video[0], ref)
    _, last, _ = match_reference(video[-1], ref)
    return first, last


def prompt_follow(video: np.ndarray, refs: Sequence[np.ndarray], sprites: Sequence[dict]) -> float:
    """Fraction of (sprite, axis) pairs whose tracked displacement matches the captioned direction.

    A still axis matches when the tracked move is at most one pixel.
    """
    if len(refs) != len(sprites):
        raise ContractError("prompt_follow needs one reference per sprite")
    hits = []
    F = video.shape[0]
    for ref, sp in zip(refs, sprites):
        (r0, c0), (r1, c1) = _track(video, ref)
        for moved, v in ((r1 - r0, sp["velocity"][0]), (c1 - c0, sp["velocity"][1])):
            if v == 0:
                hits.append(abs(moved) <= 1)
            else:
                hits.append(np.sign(moved) == np.sign(v) and abs(moved) >= (F - 1) * abs(v) // 2)
    return float(np.mean(hits)) if hits else 0.0


def sign_test(deltas: Sequence[float]) -> dict:
    """One-sided paired sign test that deltas are positive; zero deltas are dropped."""
    d = np.asarray(deltas, dtype=np.float64)
    pos, neg = int((d > 0).sum()), int((d < 0).sum())
    p = 1.0 if pos + neg == 0 else float(binomtest(pos, pos + neg, 0.5, alternative="greater").pvalue)
    return {"n_pos": pos, "n_neg": neg, "n_zero": int(len(d) - pos - neg), "p_value": p}


@dataclass
class ClipResult:
    clip_id: str
    seed: int
    consistency: dict[str, float]
    mean_consistency: float
    prompt_follow: float


@dataclass
class EvalReport:
    checkpoint_sha256: str
    config_hash: str
    seed: int
    guidance: float
    clips: list[ClipResult]
    run_name: str = ""
    aggregate: dict = field(default_factory=dict)
    baseline: dict | None = None
    version: int = REPORT_VERSION

    def finalize(self) -> "EvalReport":
        if not self.clips:
            raise ConfigError("evaluation set is empty")
        self.clips.sort(key=lambda c: c.clip_id)
        self.aggregate = {
            "mean_consistency": float(np.mean([c.mean_consistency for c in self.clips])),
            "mean_prompt_follow": float(np.mean([c.prompt_follow for c in self.clips])),
            "n_clips": len(self.clips),
        }
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("version") != REPORT_VERSION:
            raise ManifestError(f"unsupported eval report version {d.get('version')}")
        clips = [ClipResult(**c) for c in d["clips"]]
        return cls(d["checkpoint_sha256"], d["config_hash"], d["seed"], d["guidance"], clips, d.get("run_name", ""),
                   d.get("aggregate", {}), d.get("baseline"), d["version"])


def compare(report: EvalReport, baseline: EvalReport, name: str = "baseline") -> dict:
    """Paired per-clip consistency deltas (report - baseline) over shared clip ids."""
    base = {c.clip_id: c for c in baseline.clips}
    shared = sorted(c.clip_id for c in report.clips if c.clip_id in base)
    if not shared:
        raise ConfigError("reports share no clip ids")
    mine = {c.clip_id: c for c in report.clips}
    deltas = {cid: mine[cid].mean_consistency - base[cid].mean_consistency for cid in shared}
    pf = [mine[cid].prompt_follow - base[cid].prompt_follow for cid in shared]
    return {
        "name": name,
        "checkpoint_sha256": baseline.checkpoint_sha256,
        "deltas": deltas,
        "mean_delta": float(np.mean(list(deltas.values()))),
        "mean_prompt_follow_delta": float(np.mean(pf)),
        "sign_test": sign_test(list(deltas.values())),
    }


def write_report(path: str | Path, report: EvalReport) -> None:
    from .curation import _atomic_write_text

    _atomic_write_text(Path(path), json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def read_report(path: str | Path) -> EvalReport:
    try:
        return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: malformed eval report ({exc})") from exc
