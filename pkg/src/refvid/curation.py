"""Synthetic multi-subject clips with exact ground truth, and the curation pipeline.

Sprites move along integer-velocity straight lines over a smooth textured
background. Every rendered value is a multiple of 1/255, so clips survive an
8-bit lossless round trip bit-for-bit. Ground-truth masks stand in for the
detector and segmenter; the pipeline stages (scene cuts, motion/aesthetic
filtering, reference extraction, manifests) run on them unchanged.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigError, ExtractionError, ManifestError

COLORS: dict[str, tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (50, 190, 70),
    "blue": (50, 90, 230),
    "yellow": (235, 215, 40),
    "magenta": (210, 50, 200),
    "cyan": (40, 210, 220),
    "orange": (245, 140, 30),
}
BACKGROUNDS: dict[str, tuple[int, int, int]] = {
    "navy": (15, 20, 70),
    "maroon": (120, 15, 20),
    "sand": (210, 190, 120),
    "sky": (130, 190, 240),
    "teal": (10, 120, 130),
}
SKIN = (230, 180, 140)
SHAPES = ("disc", "square", "triangle")
PATTERNS = ("plain", "stripes", "checker", "ring")
# random objects always carry texture: a flat-colour reference has no defined NCC
RANDOM_PATTERNS = ("stripes", "checker", "ring")
FACE_DILATION = 1.2
SCHEMA_VERSION = 1
REF_KINDS = ("Human", "Face", "Obj")
DEFAULT_CUT_THRESHOLD = 0.1


class PlacementError(ConfigError):
    pass


@dataclass
class SpriteSpec:
    label: str
    shape: str  # disc | square | triangle | human
    color: str
    size: int
    start: tuple[int, int]  # top-left (row, col) at frame 0
    velocity: tuple[int, int]  # (d_row, d_col) pixels per frame
    role: str = "object"  # object | human
    pattern: str = "plain"

    def to_dict(self) -> dict:
        return {
            "label": self.label, "shape": self.shape, "color": self.color, "size": self.size,
            "start": list(self.start), "velocity": list(self.velocity), "role": self.role,
            "pattern": self.pattern,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpriteSpec":
        return cls(d["label"], d["shape"], d["color"], int(d["size"]), tuple(d["start"]),
                   tuple(d["velocity"]), d.get("role", "object"), d.get("pattern", "plain"))

    def position(self, frame: int) -> tuple[int, int]:
        return self.start[0] + self.velocity[0] * frame, self.start[1] + self.velocity[1] * frame


@dataclass
class SynthClip:
    frames: np.ndarray  # F x H x W x 3, values k/255
    masks: dict[str, np.ndarray]  # label -> F x H x W bool (full silhouette, ignoring occlusion)
    face_masks: dict[str, np.ndarray]
    caption: str
    specs: list[SpriteSpec]
    background: str = ""


# ---------------------------------------------------------------- sprite rendering

def sprite_mask(shape: str, size: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Local size x size silhouette, plus the face sub-mask for humans."""
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    if shape == "disc":
        return (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0) ** 2, None
    if shape == "square":
        return np.ones((size, size), dtype=bool), None
    if shape == "triangle":
        half = (yy + 1) / size * (size / 2.0)
        return np.abs(xx - c) <= half, None
    if shape == "human":
        head = size // 2
        hc = (head - 1) / 2.0
        face = np.zeros((size, size), dtype=bool)
        off = (size - head) // 2
        fy, fx = np.mgrid[0:head, 0:head]
        face[:head, off:off + head] = (fy - hc) ** 2 + (fx - hc) ** 2 <= (head / 2.0) ** 2
        body = np.zeros((size, size), dtype=bool)
        body[head:, size // 6: size - size // 6] = True
        return face | body, face
    raise ConfigError(f"unknown sprite shape {shape!r}")


def sprite_pixels(spec: SpriteSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """uint8 colour canvas, silhouette mask, face mask."""
    mask, face = sprite_mask(spec.shape, spec.size)
    base = np.array(COLORS[spec.color], dtype=np.int32)
    alt = base // 2 + 20
    yy, xx = np.mgrid[0:spec.size, 0:spec.size]
    if spec.pattern == "stripes":
        use_alt = (yy // 2) % 2 == 1
    elif spec.pattern == "checker":
        use_alt = ((yy // 3) + (xx // 3)) % 2 == 1
    elif spec.pattern == "ring":
        use_alt = (yy < 2) | (xx < 2) | (yy >= spec.size - 2) | (xx >= spec.size - 2)
    elif spec.pattern == "plain":
        use_alt = np.zeros_like(mask)
    else:
        raise ConfigError(f"unknown pattern {spec.pattern!r}")
    canvas = np.where(use_alt[..., None], alt, base)
    if face is not None:
        canvas = np.where(face[..., None], np.array(SKIN), canvas)
    return canvas.astype(np.uint8), mask, face


def render_background(name: str, size: int, rng: np.random.Generator) -> np.ndarray:
    base = np.array(BACKGROUNDS[name], dtype=np.float64)
    yy, xx = np.mgrid[0:size, 0:size] / size
    fy, fx = rng.uniform(1.0, 3.0, 2)
    ph = rng.uniform(0, 2 * np.pi)
    tex = 8.0 * np.sin(2 * np.pi * (fy * yy + fx * xx) + ph) + 6.0 * (yy - 0.5)
    return np.clip(np.round(base + tex[..., None]), 0, 255).astype(np.uint8)


def _sprite_fits(spec: SpriteSpec, frames: int, size: int) -> bool:
    for f in (0, frames - 1):
        r, c = spec.position(f)
        if r < 0 or c < 0 or r + spec.size > size or c + spec.size > size:
            return False
    return True


def _local_masks(spec: SpriteSpec, frame: int, size: int) -> tuple[np.ndarray, np.ndarray | None]:
    _, m, face = sprite_pixels(spec)
    r, c = spec.position(frame)
    full = np.zeros((size, size), dtype=bool)
    full[r:r + spec.size, c:c + spec.size] = m
    fm = None
    if face is not None:
        fm = np.zeros((size, size), dtype=bool)
        fm[r:r + spec.size, c:c + spec.size] = face
    return full, fm


def synth_clip(
    specs: Sequence[SpriteSpec],
    frames: int = 8,
    size: int = 32,
    rng: np.random.Generator | None = None,
    background: str | None = None,
    max_overlap: int = 0,
    retries: int = 200,
) -> SynthClip:
    """Render sprites along their paths; later sprites draw on top.

    When frame-0 silhouettes overlap by more than ``max_overlap`` pixels,
    start positions are re-drawn with ``rng`` up to ``retries`` times before
    raising :class:`PlacementError`.
    """
    if not 1 <= len(specs) <= 6:
        raise ConfigError(f"a clip holds 1-6 sprites, got {len(specs)}")
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"sprite labels must be unique within a clip: {labels}")
    rng = rng if rng is not None else np.random.default_rng(0)
    specs = [SpriteSpec(**{**s.__dict__}) for s in specs]
    for s in specs:
        if not _sprite_fits(s, frames, size):
            raise PlacementError(f"sprite {s.label!r} leaves the {size}x{size} frame")
    for attempt in range(retries + 1):
        occ = np.zeros((size, size), dtype=np.int32)
        for s in specs:
            occ += _local_masks(s, 0, size)[0]
        if int((occ > 1).sum()) <= max_overlap:
            break
        if attempt == retries:
            raise PlacementError(f"could not place {labels} without overlap after {retries} retries")
        for s in specs:
            s.start = _random_start(s, frames, size, rng)
    bg_name = background or str(rng.choice(sorted(BACKGROUNDS)))
    bg = render_background(bg_name, size, rng)
    out = np.repeat(bg[None], frames, axis=0)
    masks = {s.label: np.zeros((frames, size, size), dtype=bool) for s in specs}
    face_masks = {}
    for s in specs:
        canvas, _, face = sprite_pixels(s)
        if face is not None:
            face_masks[s.label] = np.zeros((frames, size, size), dtype=bool)
        for f in range(frames):
            m, fm = _local_masks(s, f, size)
            masks[s.label][f] = m
            r, c = s.position(f)
            region = out[f, r:r + s.size, c:c + s.size]
            local = m[r:r + s.size, c:c + s.size]
            region[local] = canvas[local]
            if fm is not None:
                face_masks[s.label][f] = fm
    return SynthClip(out.astype(np.float64) / 255.0, masks, face_masks, make_caption(specs), specs, bg_name)


def direction_word(velocity: Sequence[int]) -> str:
    dr, dc = velocity
    vert = "up" if dr < 0 else "down" if dr > 0 else ""
    horiz = "left" if dc < 0 else "right" if dc > 0 else ""
    if not vert and not horiz:
        return "still"
    return "-".join(w for w in (vert, horiz) if w)


def make_caption(specs: Sequence[SpriteSpec]) -> str:
    clauses = []
    for s in specs:
        verb = "walks" if s.role == "human" else "moves"
        d = direction_word(s.velocity)
        clauses.append(f"a {s.label} stays still" if d == "still" else f"a {s.label} {verb} {d}")
    return " and ".join(clauses)


def _random_start(spec: SpriteSpec, frames: int, size: int, rng: np.random.Generator) -> tuple[int, int]:
    lo, hi = [], []
    for v in spec.velocity:
        travel = v * (frames - 1)
        lo.append(max(0, -travel))
        hi.append(min(size - spec.size, size - spec.size - travel))
    if lo[0] > hi[0] or lo[1] > hi[1]:
        raise PlacementError(f"sprite {spec.label!r} cannot travel {spec.velocity} within the frame")
    return int(rng.integers(lo[0], hi[0] + 1)), int(rng.integers(lo[1], hi[1] + 1))


def random_specs(
    rng: np.random.Generator,
    n: int,
    frames: int = 8,
    size: int = 32,
    sprite_sizes: tuple[int, int] = (6, 10),
    max_speed: int = 1,
    human_prob: float = 0.25,
    static: bool = False,
) -> list[SpriteSpec]:
    """Draw ``n`` sprites with unique labels and in-frame straight paths."""
    specs: list[SpriteSpec] = []
    used_colors: set[str] = set()
    has_human = False
    for _ in range(n):
        color = str(rng.choice([c for c in sorted(COLORS) if c not in used_colors]))
        used_colors.add(color)
        human = not has_human and rng.random() < human_prob
        sz = int(rng.integers(sprite_sizes[0], sprite_sizes[1] + 1))
        if human:
            has_human = True
            sz = max(sz, 10)
            sz += sz % 2
            shape, label, role = "human", f"person in {color}", "human"
            pattern = "plain"
        else:
            shape = str(rng.choice(SHAPES))
            label, role = f"{color} {shape}", "object"
            pattern = str(rng.choice(RANDOM_PATTERNS))
        vel = (0, 0)
        if not static:
            while vel == (0, 0):
                vel = (int(rng.integers(-max_speed, max_speed + 1)), int(rng.integers(-max_speed, max_speed + 1)))
        spec = SpriteSpec(label, shape, color, sz, (0, 0), vel, role, pattern)
        spec.start = _random_start(spec, frames, size, rng)
        specs.append(spec)
    return specs


# ---------------------------------------------------------------- pipeline stages

def detect_scene_changes(video: np.ndarray, threshold: float = DEFAULT_CUT_THRESHOLD) -> list[int]:
    """Indices i where frame i starts a new shot (mean |f_i - f_{i-1}| > threshold)."""
    video = np.asarray(video, dtype=np.float64)
    if video.shape[0] < 2:
        raise ConfigError("scene detection needs at least two frames")
    diffs = np.abs(np.diff(video, axis=0)).mean(axis=tuple(range(1, video.ndim)))
    return [int(i) + 1 for i in np.nonzero(diffs > threshold)[0]]


def split_at_cuts(n_frames: int, cuts: Sequence[int]) -> list[tuple[int, int]]:
    bounds = [0, *sorted(cuts), n_frames]
    return [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def motion_score(video: np.ndarray) -> float:
    video = np.asarray(video, dtype=np.float64)
    if video.shape[0] < 2:
        return 0.0
    return float(np.abs(np.diff(video, axis=0)).mean())


class AestheticScorer(Protocol):
    def score(self, video: np.ndarray) -> float: ...


class HeuristicAesthetic:
    """Contrast + colourfulness stand-in in [0, 1]; not a learned aesthetic model."""

    def score(self, video: np.ndarray) -> float:
        v = np.asarray(video, dtype=np.float64) * 255.0
        r, g, b = v[..., 0], v[..., 1], v[..., 2]
        lum = 0.299 * r + 0.587 * g + 0.114 * b
        contrast = min(1.0, float(lum.std()) / 64.0)
        rg, yb = r - g, 0.5 * (r + g) - b
        colorful = np.sqrt(rg.std() ** 2 + yb.std() ** 2) + 0.3 * np.sqrt(rg.mean() ** 2 + yb.mean() ** 2)
        return 0.5 * contrast + 0.5 * min(1.0, float(colorful) / 100.0)


@dataclass
class ClipScores:
    motion_score: float
    aesthetic_score: float
    kept: bool


def filter_clips(
    clips: Sequence[np.ndarray],
    motion_min: float = 0.002,
    aesthetic_min: float = 0.1,
    scorer: AestheticScorer | None = None,
) -> tuple[list[int], list[ClipScores]]:
    """Keep clips whose motion and aesthetic scores both reach the thresholds.

    Returns indices of kept clips and per-clip scores.
    """
    scorer = scorer or HeuristicAesthetic()
    kept, scores = [], []
    for i, clip in enumerate(clips):
        m = motion_score(clip)
        a = float(scorer.score(clip))
        ok = m >= motion_min and a >= aesthetic_min
        scores.append(ClipScores(m, a, ok))
        if ok:
            kept.append(i)
    return kept, scores


# ---------------------------------------------------------------- references

def bbox_of(mask: np.ndarray) -> tuple[int, int, int, int]:
    """(row0, col0, row1, col1), end-exclusive."""
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def dilate_bbox(box: Sequence[int], factor: float, limit: tuple[int, int]) -> tuple[int, int, int, int]:
    r0, c0, r1, c1 = box
    cr, cc = (r0 + r1) / 2.0, (c0 + c1) / 2.0
    hr, hc = (r1 - r0) * factor / 2.0, (c1 - c0) * factor / 2.0
    return (max(0, int(np.floor(cr - hr))), max(0, int(np.floor(cc - hc))),
            min(limit[0], int(np.ceil(cr + hr))), min(limit[1], int(np.ceil(cc + hc))))


def crop_rgba(frame: np.ndarray, alpha: np.ndarray, box: Sequence[int]) -> np.ndarray:
    r0, c0, r1, c1 = box
    rgb = frame[r0:r1, c0:c1, :3]
    a = alpha[r0:r1, c0:c1].astype(np.float64)[..., None]
    return np.concatenate([rgb * a, a], axis=-1)


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in label)


@dataclass
class Reference:
    kind: str
    label: str
    asset: str
    bbox: list[int]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "label": self.label, "asset": self.asset, "bbox": list(self.bbox)}


@dataclass
class CurationManifest:
    clip_id: str
    caption: str
    references: list[Reference]
    video: str
    provenance: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = dict(self.extra)
        d.update({
            "schema_version": self.schema_version,
            "clip_id": self.clip_id,
            "caption": self.caption,
            "video": self.video,
            "references": [r.to_dict() for r in self.references],
            "provenance": self.provenance,
        })
        return d


def extract_references(
    clip: SynthClip,
    out_dir: str | Path,
    clip_id: str,
    labels: Sequence[str] | None = None,
    provenance: dict | None = None,
    video_rel: str | None = None,
) -> CurationManifest:
    """Crop one RGBA reference per label from frame 0 and write the assets.

    Objects yield an Obj entry; humans a Human entry plus a Face entry whose
    box is the face box dilated by 1.2. Alpha is the ground-truth silhouette.
    """
    out_dir = Path(out_dir)
    labels = list(clip.masks) if labels is None else list(labels)
    if not labels:
        raise ExtractionError("no entity labels to extract")
    roles = {s.label: s.role for s in clip.specs}
    frame0 = clip.frames[0]
    H, W = frame0.shape[:2]
    refs: list[Reference] = []
    (out_dir / "refs").mkdir(parents=True, exist_ok=True)
    for label in labels:
        if label not in clip.masks or not clip.masks[label][0].any():
            raise ExtractionError(f"label {label!r} has an empty first-frame mask")
        m = clip.masks[label][0]
        box = bbox_of(m)
        kind = "Human" if roles.get(label) == "human" else "Obj"
        rel = f"refs/{clip_id}_{kind.lower()}_{_slug(label)}.png"
        write_png(out_dir / rel, crop_rgba(frame0, m, box))
        refs.append(Reference(kind, label, rel, list(box)))
        if kind == "Human":
            fm = clip.face_masks[label][0]
            fbox = dilate_bbox(bbox_of(fm), FACE_DILATION, (H, W))
            rel = f"refs/{clip_id}_face_{_slug(label)}.png"
            write_png(out_dir / rel, crop_rgba(frame0, m, fbox))
            refs.append(Reference("Face", label, rel, list(fbox)))
    prov = dict(provenance or {})
    return CurationManifest(clip_id, clip.caption, refs, video_rel or f"videos/{clip_id}", prov)


# ---------------------------------------------------------------- raster / video IO

def write_png(path: str | Path, img: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    mode = {3: "RGB", 4: "RGBA"}[arr.shape[-1]]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode=mode).save(path, format="PNG")


def read_png(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 255.0


def write_video(directory: str | Path, frames: np.ndarray, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, f in enumerate(frames):
        name = f"{i:04d}.png"
        write_png(directory / name, f)
        files.append(name)
    index = {"frames": len(files), "height": int(frames.shape[1]), "width": int(frames.shape[2]), "files": files}
    if extra:
        index.update(extra)
    _atomic_write_text(directory / "index.json", json.dumps(index, indent=2, sort_keys=True))


def read_video(directory: str | Path) -> np.ndarray:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    return np.stack([read_png(directory / name) for name in index["files"]])


# ---------------------------------------------------------------- manifests

def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(path: str | Path, manifest: CurationManifest) -> None:
    validate_manifest(manifest.to_dict())
    _atomic_write_text(Path(path), json.dumps(manifest.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n")


_REQUIRED = {"schema_version": int, "clip_id": str, "caption": str, "video": str, "references": list, "provenance": dict}
_REF_REQUIRED = {"kind": str, "label": str, "asset": str, "bbox": list}


def validate_manifest(d: dict) -> None:
    for key, typ in _REQUIRED.items():
        if key not in d:
            raise ManifestError(f"manifest missing required field {key!r}")
        if not isinstance(d[key], typ):
            raise ManifestError(f"manifest field {key!r} must be {typ.__name__}")
    if d["schema_version"] > SCHEMA_VERSION:
        raise ManifestError(f"manifest schema_version {d['schema_version']} newer than supported {SCHEMA_VERSION}")
    refs = d["references"]
    if not 1 <= len(refs) <= 6:
        raise ManifestError(f"field 'references' must hold 1-6 entries, got {len(refs)}")
    for i, r in enumerate(refs):
        for key, typ in _REF_REQUIRED.items():
            if key not in r:
                raise ManifestError(f"references[{i}] missing required field {key!r}")
            if not isinstance(r[key], typ):
                raise ManifestError(f"references[{i}].{key} must be {typ.__name__}")
        if r["kind"] not in REF_KINDS:
            raise ManifestError(f"references[{i}].kind must be one of {REF_KINDS}, got {r['kind']!r}")
        if len(r["bbox"]) != 4:
            raise ManifestError(f"references[{i}].bbox must have 4 entries")
        if r["kind"] == "Obj" and r["label"] not in d["caption"]:
            raise ManifestError(f"caption does not mention object label {r['label']!r}")


def manifest_from_dict(d: dict) -> CurationManifest:
    validate_manifest(d)
    known = set(_REQUIRED)
    extra = {k: v for k, v in d.items() if k not in known}
    refs = [Reference(r["kind"], r["label"], r["asset"], list(r["bbox"])) for r in d["references"]]
    return CurationManifest(d["clip_id"], d["caption"], refs, d["video"], dict(d["provenance"]),
                            d["schema_version"], extra)


def read_manifest(path: str | Path, check_assets: bool = False) -> CurationManifest:
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(d, dict):
        raise ManifestError(f"{path}: top level must be an object")
    try:
        m = manifest_from_dict(d)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from exc
    if check_assets:
        root = path.parent.parent
        for r in m.references:
            if not (root / r.asset).exists():
                raise ManifestError(f"{path}: asset {r.asset!r} does not resolve")
    return m


def ref_canvas(rgba: np.ndarray, size: int = 16) -> np.ndarray:
    """Centre a straight-alpha RGBA crop on a transparent size x size canvas.

    Crops larger than the canvas are nearest-downscaled to fit first.
    """
    h, w = rgba.shape[:2]
    if h > size or w > size:
        s = size / max(h, w)
        nh, nw = max(1, int(h * s)), max(1, int(w * s))
        ri = (np.arange(nh) * h // nh).astype(int)
        ci = (np.arange(nw) * w // nw).astype(int)
        rgba = rgba[ri][:, ci]
        h, w = nh, nw
    out = np.zeros((size, size, 4))
    r0, c0 = (size - h) // 2, (size - w) // 2
    out[r0:r0 + h, c0:c0 + w] = rgba
    return out


def straight_alpha(rgba_premult: np.ndarray) -> np.ndarray:
    a = rgba_premult[..., 3:4]
    rgb = np.where(a > 0, rgba_premult[..., :3] / np.maximum(a, 1e-12), 0.0)
    return np.concatenate([rgb, a], axis=-1)
