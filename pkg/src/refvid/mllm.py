"""Frozen stand-ins for the multimodal encoder and the teacher text encoder.

Both are fixed-seed random transformers evaluated in plain numpy: no tape is
ever built over their weights, so no gradient can reach them. The
multimodal encoder consumes an instruction with interleaved image slots and
emits ``L x 2048`` hidden states; the teacher maps a caption to exactly ``K``
rows of width ``d``.
"""
from __future__ import annotations

import base64
import hashlib
import io
import json
import math
import re
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import nn
from .errors import ConfigError, DimensionError, EncodingError

TEMPLATE_VERSION = "v1"
# Placeholder wording; the published template is not reproduced verbatim.
DEFAULT_TEMPLATE = "Generate a video of the following scene. Caption: {caption}. Subjects: {subjects}."
RESERVED = set("[]:{}")
_TOKEN_RE = re.compile(r"\[IMG:[^\]]*\]|\w+|[^\w\s]")
_SLOT_RE = re.compile(r"^\[IMG:([^\]]*)\]$")


@dataclass
class ImageSlot:
    label: str
    image: np.ndarray  # H x W x 4 RGBA, straight alpha, values in [0, 1]


@dataclass
class Instruction:
    text: str
    image_slots: list[ImageSlot] = field(default_factory=list)
    template_version: str = TEMPLATE_VERSION


@dataclass
class HiddenStates:
    tokens: np.ndarray  # L x d_mllm

    @property
    def L(self) -> int:
        return self.tokens.shape[0]


@dataclass
class TeacherFeatures:
    tokens: np.ndarray  # K x d

    @property
    def K(self) -> int:
        return self.tokens.shape[0]


def load_template(path) -> str:
    with open(path, encoding="utf-8") as fh:
        text = fh.read().rstrip("\n")
    for key in ("{caption}", "{subjects}"):
        if key not in text:
            raise ConfigError(f"template {path} lacks placeholder {key}")
    return text


def build_instruction(caption: str, refs: Sequence, template: str = DEFAULT_TEMPLATE,
                      version: str = TEMPLATE_VERSION) -> Instruction:
    """Fill the template; one ``[IMG:label]`` placeholder per reference, in order.

    ``refs`` holds ``(label, rgba_image)`` pairs or :class:`ImageSlot` objects.
    """
    slots = [r if isinstance(r, ImageSlot) else ImageSlot(r[0], r[1]) for r in refs]
    for s in slots:
        bad = RESERVED.intersection(s.label)
        if bad:
            raise EncodingError(f"label {s.label!r} contains reserved delimiter(s) {sorted(bad)}")
    subjects = " ".join(f"[IMG:{s.label}]" for s in slots)
    text = template.replace("{caption}", caption.strip().rstrip(".")).replace("{subjects}", subjects)
    return Instruction(text, slots, version)


def tokenize(text: str) -> list[str]:
    """Words and punctuation lowercased; image placeholders kept verbatim."""
    return [t if _SLOT_RE.match(t) else t.lower() for t in _TOKEN_RE.findall(text)]


def hash_token(token: str, vocab: int, salt: str) -> int:
    digest = hashlib.blake2b(f"{salt}:{token}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % vocab


def _layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _block(p: dict, x: np.ndarray, heads: int) -> np.ndarray:
    h = _layer_norm(x)
    q, k, v = h @ p["wq"], h @ p["wk"], h @ p["wv"]
    dh = q.shape[1] // heads
    outs = []
    for i in range(heads):
        sl = slice(i * dh, (i + 1) * dh)
        outs.append(_softmax(q[:, sl] @ k[:, sl].T / math.sqrt(dh)) @ v[:, sl])
    x = x + np.concatenate(outs, axis=1) @ p["wo"]
    return x + _gelu(_layer_norm(x) @ p["w1"]) @ p["w2"]


def _block_params(rng: np.random.Generator, w: int) -> dict:
    s = 1.0 / math.sqrt(w)
    return {
        "wq": rng.standard_normal((w, w)) * s,
        "wk": rng.standard_normal((w, w)) * s,
        "wv": rng.standard_normal((w, w)) * s,
        "wo": rng.standard_normal((w, w)) * s,
        "w1": rng.standard_normal((w, 2 * w)) * s,
        "w2": rng.standard_normal((2 * w, w)) * s / math.sqrt(2),
    }


def resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    H, W = img.shape[:2]
    if (H, W) == (size, size):
        return img
    ri = (np.arange(size) * H // size).astype(int)
    ci = (np.arange(size) * W // size).astype(int)
    return img[ri][:, ci]


class MultimodalEncoder(Protocol):
    width: int

    def encode(self, instr: Instruction) -> HiddenStates: ...


@dataclass(frozen=True)
class StubMLLMConfig:
    width: int = 2048
    inner: int = 64
    heads: int = 4
    layers: int = 2
    vocab: int = 4096
    max_len: int = 256
    image_size: int = 16
    patch: int = 4
    pool: int = 2
    seed: int = 1234


class StubMLLM:
    """Fixed-seed random transformer fusing text tokens and pooled image patches."""

    def __init__(self, cfg: StubMLLMConfig = StubMLLMConfig()):
        self.cfg = cfg
        self.width = cfg.width
        rng = np.random.default_rng(cfg.seed)
        w = cfg.inner
        pd = cfg.patch * cfg.patch * 4
        self.params: dict[str, np.ndarray] = {
            "tok_emb": rng.standard_normal((cfg.vocab, w)),
            "pos_emb": rng.standard_normal((cfg.max_len, w)) * 0.5,
            "img_type": rng.standard_normal(w),
            "patch_w": rng.standard_normal((pd, w)) * (2.0 / math.sqrt(pd)),
            "patch_b": rng.standard_normal(w) * 0.5,
            "vis_w": rng.standard_normal((w, w)) / math.sqrt(w),
            "out_w": rng.standard_normal((w, cfg.width)) / math.sqrt(w),
        }
        for i in range(cfg.layers):
            for k, v in _block_params(rng, w).items():
                self.params[f"block{i}.{k}"] = v

    def checksum(self) -> str:
        return nn.checksum(self.params)

    def _image_tokens(self, img: np.ndarray) -> np.ndarray:
        from .entity_vae import premultiply, to_patches

        c = self.cfg
        x = premultiply(resize_nearest(np.asarray(img, dtype=np.float64), c.image_size))
        p = self.params
        emb = _gelu(to_patches(x, c.patch) @ p["patch_w"] + p["patch_b"])
        g = c.image_size // c.patch
        emb = emb.reshape(g // c.pool, c.pool, g // c.pool, c.pool, -1).mean(axis=(1, 3))
        return np.tanh(emb.reshape(-1, emb.shape[-1]) @ p["vis_w"]) + p["img_type"]

    def vision_features(self, img: np.ndarray) -> np.ndarray:
        """Coarse pooled features of one image from the vision tower, (pool^2) x width."""
        return _layer_norm(self._image_tokens(img)) @ self.params["out_w"]

    def embed(self, instr: Instruction) -> np.ndarray:
        c = self.cfg
        rows = []
        slot = 0
        for tok in tokenize(instr.text):
            m = _SLOT_RE.match(tok)
            if m:
                if slot >= len(instr.image_slots):
                    raise EncodingError("more image placeholders than image slots")
                for word in tokenize(m.group(1)):
                    rows.append(self.params["tok_emb"][hash_token(word, c.vocab, "mllm")][None])
                rows.append(self._image_tokens(instr.image_slots[slot].image))
                slot += 1
            else:
                rows.append(self.params["tok_emb"][hash_token(tok, c.vocab, "mllm")][None])
        if slot != len(instr.image_slots):
            raise EncodingError(f"{len(instr.image_slots)} image slots but {slot} placeholders")
        x = np.concatenate(rows, axis=0)
        if x.shape[0] > c.max_len:
            raise DimensionError(f"instruction length {x.shape[0]} exceeds max_len {c.max_len}")
        return x + self.params["pos_emb"][: x.shape[0]]

    def encode(self, instr: Instruction) -> HiddenStates:
        x = self.embed(instr)
        for i in range(self.cfg.layers):
            x = _block({k.split(".", 1)[1]: v for k, v in self.params.items() if k.startswith(f"block{i}.")},
                       x, self.cfg.heads)
        return HiddenStates(_layer_norm(x) @ self.params["out_w"])


def encode_multimodal(instr: Instruction, encoder: MultimodalEncoder) -> HiddenStates:
    return encoder.encode(instr)


@dataclass(frozen=True)
class TeacherConfig:
    d: int = 128
    K: int = 226
    heads: int = 4
    layers: int = 1
    vocab: int = 4096
    seed: int = 4321


class StubTeacher:
    """Frozen text encoder emitting exactly K rows; short captions pad with a pad token."""

    PAD = "<pad>"

    def __init__(self, cfg: TeacherConfig = TeacherConfig()):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d
        self.params: dict[str, np.ndarray] = {
            "tok_emb": rng.standard_normal((cfg.vocab, d)),
            "pos_emb": rng.standard_normal((cfg.K, d)) * 0.5,
        }
        for i in range(cfg.layers):
            for k, v in _block_params(rng, d).items():
                self.params[f"block{i}.{k}"] = v

    def checksum(self) -> str:
        return nn.checksum(self.params)

    def encode(self, caption: str) -> TeacherFeatures:
        c = self.cfg
        toks = [t for t in tokenize(caption) if not _SLOT_RE.match(t)][: c.K]
        toks = toks + [self.PAD] * (c.K - len(toks))
        x = self.params["tok_emb"][[hash_token(t, c.vocab, "teacher") for t in toks]] + self.params["pos_emb"]
        for i in range(c.layers):
            x = _block({k.split(".", 1)[1]: v for k, v in self.params.items() if k.startswith(f"block{i}.")},
                       x, c.heads)
        return TeacherFeatures(_layer_norm(x))


def teacher_encode(caption: str, teacher: StubTeacher) -> TeacherFeatures:
    return teacher.encode(caption)


# -------------------------------------------------------------- external encoder wire format
#
# Request:  {"schema": "mllm-encode/1", "template_version": str, "text": str,
#            "images": [{"label": str, "png_base64": str}], "timeout_s": float}
# Response: {"schema": "mllm-encode/1", "shape": [L, width], "dtype": "float64",
#            "data_base64": <row-major little-endian bytes>}

WIRE_SCHEMA = "mllm-encode/1"


def _png_b64(img: np.ndarray) -> str:
    from PIL import Image

    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGBA" if arr.shape[-1] == 4 else "RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _png_from_b64(s: str) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(io.BytesIO(base64.b64decode(s))), dtype=np.float64) / 255.0


def encode_request(instr: Instruction, timeout_s: float = 30.0) -> str:
    return json.dumps({
        "schema": WIRE_SCHEMA,
        "template_version": instr.template_version,
        "text": instr.text,
        "images": [{"label": s.label, "png_base64": _png_b64(s.image)} for s in instr.image_slots],
        "timeout_s": timeout_s,
    })


def decode_request(payload: str) -> Instruction:
    msg = json.loads(payload)
    if msg.get("schema") != WIRE_SCHEMA:
        raise EncodingError(f"unsupported schema {msg.get('schema')!r}")
    slots = [ImageSlot(im["label"], _png_from_b64(im["png_base64"])) for im in msg["images"]]
    return Instruction(msg["text"], slots, msg["template_version"])


def encode_response(hidden: HiddenStates) -> str:
    arr = np.ascontiguousarray(hidden.tokens, dtype="<f8")
    return json.dumps({
        "schema": WIRE_SCHEMA,
        "shape": list(arr.shape),
        "dtype": "float64",
        "data_base64": base64.b64encode(arr.tobytes()).decode("ascii"),
    })


def decode_response(payload: str, width: int | None = None) -> HiddenStates:
    msg = json.loads(payload)
    if msg.get("schema") != WIRE_SCHEMA or msg.get("dtype") != "float64":
        raise EncodingError("malformed encoder response header")
    raw = base64.b64decode(msg["data_base64"])
    shape = tuple(msg["shape"])
    if len(shape) != 2 or len(raw) != 8 * shape[0] * shape[1]:
        raise EncodingError(f"response payload does not match shape {shape}")
    if width is not None and shape[1] != width:
        raise DimensionError(f"response width {shape[1]} != expected {width}")
    return HiddenStates(np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64))


class ExternalMLLMClient:
    """HTTP client for a real encoder service speaking the wire format above."""

    def __init__(self, url: str, width: int = 2048, timeout_s: float = 30.0):
        self.url = url
        self.width = width
        self.timeout_s = timeout_s

    def encode(self, instr: Instruction) -> HiddenStates:
        import urllib.request

        req = urllib.request.Request(
            self.url, data=encode_request(instr, self.timeout_s).encode(),
            headers={"Content-Type": "application/json"},
        )
        with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
            return decode_response(resp.read().decode(), self.width)
