"""Content captions, degradation text and their fixed-dimension embeddings.

Captions come from a :class:`CaptionProvider` run on high-resolution frames
and are shared across consecutive batches of frames. Text is embedded by a
frozen :class:`TextEncoder`; the built-in one is a token-hash bag of words so
everything runs without downloaded weights.
"""
from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import re
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
import requests
from PIL import Image

from .degrade import DegradationRecord, VideoClip
from .exceptions import CaptionError, ShapeError, VersioningError

logger = logging.getLogger(__name__)

CAPTION_URL_ENV = "TEXTOVSR_CAPTION_URL"
DEFAULT_BATCH = 7
EMB_MAGIC = b"TXEM"
EMB_VERSION = 1


class CaptionProvider(Protocol):
    provider_id: str

    def caption(self, frame: np.ndarray, clip_id: str = "") -> str:
        ...


class TextEncoder(Protocol):
    d_text: int
    encoder_id: str

    def encode_one(self, text: str) -> np.ndarray:
        ...


# ------------------------------------------------------------------ captioners

_PALETTE = {
    "red": (0.75, 0.15, 0.15),
    "orange": (0.85, 0.5, 0.15),
    "yellow": (0.85, 0.8, 0.2),
    "green": (0.2, 0.6, 0.25),
    "blue": (0.2, 0.3, 0.75),
    "purple": (0.5, 0.25, 0.6),
    "brown": (0.45, 0.3, 0.2),
    "gray": (0.5, 0.5, 0.5),
    "white": (0.92, 0.92, 0.92),
    "black": (0.08, 0.08, 0.08),
}


def _luma(frame):
    if frame.shape[0] >= 3:
        return 0.299 * frame[0] + 0.587 * frame[1] + 0.114 * frame[2]
    return frame[0]


class TemplateCaptioner:
    """Deterministic captioner built from coarse image statistics.

    ``granularity="coarse"`` yields a short caption (dominant color and
    brightness); ``"fine"`` adds contrast, texture and where the brightest
    region sits.
    """

    def __init__(self, granularity="fine"):
        if granularity not in ("coarse", "fine"):
            raise ValueError(f"granularity must be 'coarse' or 'fine', got {granularity!r}")
        self.granularity = granularity
        self.provider_id = f"template-{granularity}"

    def caption(self, frame, clip_id=""):
        frame = np.asarray(frame, dtype=np.float32)
        rgb = frame.reshape(frame.shape[0], -1).mean(1)
        if rgb.shape[0] == 1:
            rgb = np.repeat(rgb, 3)
        color = min(_PALETTE, key=lambda k: float(np.sum((np.array(_PALETTE[k]) - rgb[:3]) ** 2)))
        y = _luma(frame)
        mean = float(y.mean())
        light = "dark" if mean < 0.3 else "dimly lit" if mean < 0.5 else "bright" if mean < 0.75 else "very bright"
        text = f"a {light} scene with dominant {color} tones"
        if self.granularity == "coarse":
            return text
        contrast = float(y.std())
        ctext = "low contrast" if contrast < 0.08 else "moderate contrast" if contrast < 0.18 else "high contrast"
        gy, gx = np.gradient(y)
        energy = float(np.mean(np.hypot(gx, gy)))
        ttext = "smooth surfaces" if energy < 0.01 else "soft details" if energy < 0.04 else "rich fine textures"
        h, w = y.shape
        quads = {
            "upper left": y[: h // 2, : w // 2],
            "upper right": y[: h // 2, w // 2:],
            "lower left": y[h // 2:, : w // 2],
            "lower right": y[h // 2:, w // 2:],
        }
        spot = max(quads, key=lambda k: float(quads[k].mean()) if quads[k].size else -1.0)
        return f"{text}, {ctext} and {ttext}, brightest toward the {spot}"


class HttpCaptioner:
    """Client for an external captioning endpoint.

    POSTs ``{"image": <base64 PNG>, "prompt": ...}`` and expects
    ``{"caption": ...}`` back. The URL defaults to ``$TEXTOVSR_CAPTION_URL``.
    """

    def __init__(self, url=None, prompt="Describe the visual content of this frame in detail.",
                 timeout=30.0, retries=3, backoff=0.5, session=None):
        self.url = url or os.environ.get(CAPTION_URL_ENV)
        if not self.url:
            raise ValueError(f"no caption endpoint: pass url or set {CAPTION_URL_ENV}")
        self.prompt = prompt
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.session = session or requests.Session()
        self.provider_id = f"http:{self.url}"

    @staticmethod
    def encode_png(frame):
        arr = np.clip(np.rint(np.asarray(frame).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
        if arr.shape[2] == 1:
            arr = arr[:, :, 0]
        buf = io.BytesIO()
        Image.fromarray(arr).save(buf, format="PNG")
        return buf.getvalue()

    def caption(self, frame, clip_id=""):
        payload = {"image": base64.b64encode(self.encode_png(frame)).decode("ascii"), "prompt": self.prompt}
        last = None
        for attempt in range(self.retries):
            try:
                resp = self.session.post(self.url, json=payload, timeout=self.timeout)
                resp.raise_for_status()
                return str(resp.json()["caption"])
            except (requests.RequestException, KeyError, ValueError) as exc:
                last = exc
                logger.warning("caption request %d/%d failed: %s", attempt + 1, self.retries, exc)
                if attempt + 1 < self.retries:
                    time.sleep(self.backoff * 2**attempt)
        raise RuntimeError(f"caption endpoint failed after {self.retries} attempts: {last}")


def make_caption_provider(name="template", granularity="fine", **kwargs):
    if name == "template":
        return TemplateCaptioner(granularity)
    if name == "http":
        return HttpCaptioner(**kwargs)
    raise ValueError(f"unknown caption provider {name!r}")


def caption_clip(hr: VideoClip, provider: CaptionProvider, batch: int = DEFAULT_BATCH) -> list[str]:
    """One caption per frame; the provider runs once per batch on its first frame.

    A trailing partial batch gets its own caption.
    """
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    out = []
    for start in range(0, len(hr), batch):
        try:
            text = provider.caption(hr.frames[start], hr.id)
        except Exception as exc:
            raise CaptionError(start, str(exc)) from exc
        if not isinstance(text, str) or not text.strip():
            raise CaptionError(start, "provider returned an empty caption")
        out.extend([text] * min(batch, len(hr) - start))
    return out


# -------------------------------------------------------------------- encoders

_TOKEN = re.compile(r"[a-z0-9]+")


class HashTextEncoder:
    """Frozen bag-of-words embedder built from hashed token vectors.

    Each unigram and bigram maps to a fixed pseudo-random gaussian vector
    derived from its hash; a string embeds as the L2-normalized sum.
    """

    def __init__(self, d_text=64, seed=0):
        if d_text < 1:
            raise ValueError("d_text must be positive")
        self.d_text = int(d_text)
        self.seed = int(seed)
        self.encoder_id = f"hash-bow-d{self.d_text}-s{self.seed}"

    def _vec(self, token):
        digest = hashlib.blake2b(f"{self.seed}:{token}".encode(), digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        return rng.standard_normal(self.d_text)

    def encode_one(self, text):
        tokens = _TOKEN.findall(text.lower())
        if not tokens:
            return np.zeros(self.d_text, dtype=np.float32)
        grams = tokens + [f"{a}_{b}" for a, b in zip(tokens, tokens[1:])]
        v = np.sum([self._vec(g) for g in grams], axis=0)
        return (v / np.linalg.norm(v)).astype(np.float32)


class TransformersClipTextEncoder:
    """Adapter for a pretrained contrastive text tower from ``transformers``.

    Weights are loaded lazily on first use; the model runs in eval mode under
    ``torch.no_grad`` and is never updated.
    """

    def __init__(self, model_name="openai/clip-vit-large-patch14-336", device="cpu"):
        self.model_name = model_name
        self.device = device
        self.encoder_id = f"hf:{model_name}"
        self._model = None
        self._tokenizer = None
        self.d_text = None

    def _load(self):
        import torch
        from transformers import AutoTokenizer, CLIPTextModelWithProjection

        self._tokenizer = AutoTokenizer.from_pretrained(self.model_name)
        self._model = CLIPTextModelWithProjection.from_pretrained(self.model_name).to(self.device).eval()
        for p in self._model.parameters():
            p.requires_grad_(False)
        self.d_text = int(self._model.config.projection_dim)
        self._torch = torch

    def encode_one(self, text):
        if self._model is None:
            self._load()
        with self._torch.no_grad():
            tok = self._tokenizer([text], padding=True, truncation=True, return_tensors="pt").to(self.device)
            emb = self._model(**tok).text_embeds[0]
        return emb.cpu().numpy().astype(np.float32)


class EmbeddingCache:
    """String -> vector cache; concurrent readers, writers serialized by a lock."""

    def __init__(self):
        self._data: dict = {}
        self._lock = threading.Lock()

    def get(self, key):
        return self._data.get(key)

    def put(self, key, value):
        with self._lock:
            self._data.setdefault(key, value)
            return self._data[key]

    def __len__(self):
        return len(self._data)


def encode(texts: Sequence[str], encoder: TextEncoder, cache: Optional[EmbeddingCache] = None) -> list[np.ndarray]:
    """Embed each string; duplicates hit the encoder once.

    The empty string maps to the all-zero null prompt without calling the encoder.
    """
    if cache is None:
        cache = EmbeddingCache()
    out = []
    for text in texts:
        key = (getattr(encoder, "encoder_id", id(encoder)), text)
        vec = cache.get(key)
        if vec is None:
            if not text.strip():
                logger.info("encoding empty prompt as the null vector")
                vec = np.zeros(encoder.d_text, dtype=np.float32)
            else:
                vec = np.asarray(encoder.encode_one(text), dtype=np.float32)
                if vec.shape != (encoder.d_text,):
                    raise ShapeError(f"encoder returned shape {vec.shape}, expected ({encoder.d_text},)")
            vec.setflags(write=False)
            vec = cache.put(key, vec)
        out.append(vec)
    return out


# ----------------------------------------------------------------- prompt pack

@dataclass
class PromptPack:
    content_texts: list
    content_embeddings: np.ndarray
    d_text: int
    degradation_text: Optional[str] = None
    degradation_embedding: Optional[np.ndarray] = None
    provider_id: str = ""
    encoder_id: str = ""

    def __post_init__(self):
        self.content_embeddings = np.asarray(self.content_embeddings, dtype=np.float32).reshape(-1, self.d_text)
        if len(self.content_texts) != len(self.content_embeddings):
            raise ShapeError("content_texts and content_embeddings differ in length")
        if self.degradation_embedding is not None:
            self.degradation_embedding = np.asarray(self.degradation_embedding, dtype=np.float32).reshape(self.d_text)

    def __len__(self):
        return len(self.content_texts)

    @property
    def has_degradation(self):
        return self.degradation_embedding is not None

    def subset(self, indices):
        idx = list(indices)
        return PromptPack(
            [self.content_texts[i] for i in idx], self.content_embeddings[idx], self.d_text,
            self.degradation_text, self.degradation_embedding, self.provider_id, self.encoder_id,
        )

    # sidecars
    def save(self, directory):
        directory = Path(directory)
        meta = {
            "content_texts": list(self.content_texts),
            "degradation_text": self.degradation_text,
            "provider_id": self.provider_id,
            "encoder_id": self.encoder_id,
            "d_text": int(self.d_text),
        }
        (directory / "prompts.json").write_text(json.dumps(meta, indent=2))
        rows = self.content_embeddings
        if self.degradation_embedding is not None:
            rows = np.concatenate([rows, self.degradation_embedding[None]], 0)
        write_embeddings(directory / "prompts.emb", rows)

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        meta = json.loads((directory / "prompts.json").read_text())
        rows = read_embeddings(directory / "prompts.emb")
        d = int(meta["d_text"])
        if rows.shape[1] != d:
            raise VersioningError(f"embedding width {rows.shape[1]} does not match d_text {d}")
        n = len(meta["content_texts"])
        has_deg = meta.get("degradation_text") is not None
        if rows.shape[0] != n + int(has_deg):
            raise VersioningError("embedding row count does not match prompts.json")
        return cls(
            meta["content_texts"], rows[:n], d,
            meta.get("degradation_text"), rows[n] if has_deg else None,
            meta.get("provider_id", ""), meta.get("encoder_id", ""),
        )


def write_embeddings(path, rows: np.ndarray):
    """Binary sidecar: 16-byte header (magic, version, d_text, count) + row-major float32."""
    rows = np.ascontiguousarray(rows, dtype="<f4")
    count, d = rows.shape
    with open(path, "wb") as f:
        f.write(EMB_MAGIC + struct.pack("<III", EMB_VERSION, d, count))
        f.write(rows.tobytes())


def read_embeddings(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != EMB_MAGIC:
        raise VersioningError(f"{path} is not an embedding sidecar")
    version, d, count = struct.unpack("<III", raw[4:16])
    if version != EMB_VERSION:
        raise VersioningError(f"unsupported embedding sidecar version {version}")
    body = raw[16:]
    if len(body) != 4 * d * count:
        raise VersioningError(f"{path} is truncated")
    return np.frombuffer(body, dtype="<f4").reshape(count, d).astype(np.float32)


def build_prompt_pack(hr: VideoClip, record: Optional[DegradationRecord], provider: CaptionProvider,
                      encoder: TextEncoder, batch: int = DEFAULT_BATCH,
                      cache: Optional[EmbeddingCache] = None) -> PromptPack:
    """Caption ``hr`` and embed both texts; ``record=None`` gives an inference pack."""
    cache = cache if cache is not None else EmbeddingCache()
    texts = caption_clip(hr, provider, batch)
    emb = np.stack(encode(texts, encoder, cache))
    deg_text = deg_emb = None
    if record is not None:
        deg_text = record.text
        deg_emb = encode([deg_text], encoder, cache)[0]
    return PromptPack(texts, emb, encoder.d_text, deg_text, deg_emb,
                      getattr(provider, "provider_id", ""), getattr(encoder, "encoder_id", ""))
