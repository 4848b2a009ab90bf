"""High-order degradation synthesis with paired severity-binned text.

A pipeline of one or two orders, each ``blur -> resize -> noise -> jpeg``,
followed by one clip-level ``video_compression`` stage, is sampled from a
parameter-range table, applied to a high-quality clip and finished with an
antialiased bicubic downsample. Every stage carries a ``light`` / ``medium``
/ ``heavy`` label so the record renders to a description such as
``"light blur, heavy resize, ..."``.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import cv2
import numpy as np
import scipy.fft
import yaml
from PIL import Image

from .exceptions import ConfigurationError, DegenerateSizeError, RangeError, ShapeError

logger = logging.getLogger(__name__)

KINDS = ("blur", "resize", "noise", "jpeg", "video_compression")
ORDER_TEMPLATE = ("blur", "resize", "noise", "jpeg")
SEVERITIES = ("light", "medium", "heavy")
RECORD_VERSION = 1

_RESIZE_MODES = (cv2.INTER_AREA, cv2.INTER_LINEAR, cv2.INTER_CUBIC)

# Baseline JPEG luminance quantization table (quality 50).
_JPEG_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


@dataclass
class VideoClip:
    """Ordered frame stack of shape ``(n, c, h, w)`` with values in [0, 1]."""

    frames: np.ndarray
    id: str = "clip"
    fps: Fraction = Fraction(25)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ShapeError(f"clip frames must be (n>=1, c, h, w), got {self.frames.shape}")
        self.fps = Fraction(self.fps)

    @property
    def shape(self):
        return self.frames.shape

    def __len__(self):
        return self.frames.shape[0]

    def with_frames(self, frames, **meta):
        return VideoClip(frames, self.id, self.fps, {**self.meta, **meta})


@dataclass(frozen=True)
class BinEdges:
    """Range ``[lo, hi]`` split into three bins at ``e1`` and ``e2``."""

    lo: float
    e1: float
    e2: float
    hi: float
    descending: bool = False


@dataclass
class DegradationStage:
    kind: str
    params: dict
    severity: str
    order: int = 1

    def to_dict(self):
        return {"kind": self.kind, "order": self.order, "params": dict(self.params), "severity": self.severity}

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], params=dict(d["params"]), severity=d["severity"], order=int(d.get("order", 1)))


@dataclass
class DegradationRecord:
    stages: list
    seed: int
    order: int = 2
    text: str = ""

    def to_dict(self):
        return {
            "version": RECORD_VERSION,
            "seed": int(self.seed),
            "order": int(self.order),
            "stages": [s.to_dict() for s in self.stages],
            "text": self.text,
        }

    @classmethod
    def from_dict(cls, d):
        stages = [DegradationStage.from_dict(s) for s in d["stages"]]
        return cls(stages=stages, seed=int(d["seed"]), order=int(d.get("order", 2)), text=d.get("text", ""))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


class DegradationConfig:
    """Parameter-range table, bin edges and pipeline defaults.

    Args:
        data: Mapping with the structure of ``data/degradation_default.yaml``.
    """

    def __init__(self, data: Mapping):
        self.data = copy.deepcopy(dict(data))
        self.version = int(self.data.get("version", 1))
        self.order = int(self.data.get("order", 2))
        self.downscale = int(self.data.get("downscale", 4))
        self.min_size = int(self.data.get("min_size", 8))
        kinds = self.data.get("kinds") or {}
        self.ranges: dict[str, dict[str, tuple]] = {}
        self.integer: dict[str, set] = {}
        self.primary: dict[str, str] = {}
        self.bin_edges: dict[str, BinEdges] = {}
        for kind, entry in kinds.items():
            if kind not in KINDS:
                raise ConfigurationError(f"unknown degradation kind {kind!r}")
            params = entry.get("params") or {}
            if not params:
                raise ConfigurationError(f"empty parameter range for {kind!r}")
            rng = {}
            for name, bounds in params.items():
                if bounds is None or len(bounds) != 2:
                    raise ConfigurationError(f"range for {kind}.{name} must be [min, max]")
                lo, hi = float(bounds[0]), float(bounds[1])
                if not lo <= hi:
                    raise ConfigurationError(f"empty range for {kind}.{name}: [{lo}, {hi}]")
                rng[name] = (lo, hi)
            primary = entry.get("primary")
            if primary not in rng:
                raise ConfigurationError(f"primary parameter of {kind!r} must be one of {sorted(rng)}")
            self.ranges[kind] = rng
            self.integer[kind] = set(entry.get("integer") or ())
            self.primary[kind] = primary
            lo, hi = rng[primary]
            edges = entry.get("edges")
            if edges is None:
                e1, e2 = lo + (hi - lo) / 3.0, lo + 2.0 * (hi - lo) / 3.0
                if entry.get("descending"):
                    e1, e2 = hi - 2.0 * (hi - lo) / 3.0, hi - (hi - lo) / 3.0
            else:
                e1, e2 = float(edges[0]), float(edges[1])
            if not lo <= e1 <= e2 <= hi:
                raise ConfigurationError(f"bin edges of {kind!r} must be ordered inside its range")
            self.bin_edges[kind] = BinEdges(lo, e1, e2, hi, bool(entry.get("descending", False)))

    @classmethod
    def default(cls):
        text = resources.files("textovsr").joinpath("data/degradation_default.yaml").read_text()
        return cls(yaml.safe_load(text))

    @classmethod
    def from_file(cls, path):
        data = yaml.safe_load(Path(path).read_text())
        if "degradation" in data:
            data = data["degradation"]
        return cls(data)

    def check_params(self, kind, params):
        if kind not in self.ranges:
            raise ConfigurationError(f"no configured range for kind {kind!r}")
        for name, value in params.items():
            lo, hi = self.ranges[kind][name]
            if not lo <= value <= hi:
                raise RangeError(f"{kind}.{name}={value} outside [{lo}, {hi}]")


def severity_bin(kind: str, value: float, edges) -> str:
    """Bin ``value`` of the primary parameter of ``kind`` into a severity.

    Values equal to an interior edge belong to the lighter bin. For kinds
    flagged ``descending`` (jpeg quality) small values are heavy.

    Args:
        kind: Degradation kind.
        value: Primary parameter value.
        edges: Mapping kind -> :class:`BinEdges`, or a :class:`DegradationConfig`.
    """
    table = edges.bin_edges if isinstance(edges, DegradationConfig) else edges
    if kind not in table:
        raise ConfigurationError(f"no bin edges for kind {kind!r}")
    b = table[kind]
    value = float(value)
    if not b.lo <= value <= b.hi:
        raise RangeError(f"{kind} value {value} outside [{b.lo}, {b.hi}]")
    if b.descending:
        if value >= b.e2:
            return "light"
        if value >= b.e1:
            return "medium"
        return "heavy"
    if value <= b.e1:
        return "light"
    if value <= b.e2:
        return "medium"
    return "heavy"


def _draw_params(kind, cfg: DegradationConfig, rng: np.random.Generator):
    params = {}
    for name, (lo, hi) in cfg.ranges[kind].items():
        if name in cfg.integer[kind]:
            params[name] = int(rng.integers(int(lo), int(hi), endpoint=True))
        else:
            params[name] = float(rng.uniform(lo, hi))
    return params


def sample_pipeline(rng_seed: int, order: int = 2, ranges: DegradationConfig | None = None) -> DegradationRecord:
    """Sample a degradation record of the given order.

    The stage sequence is ``blur, resize, noise, jpeg`` per order followed by
    a single ``video_compression`` stage, so order 2 yields 9 stages.
    """
    cfg = ranges if ranges is not None else DegradationConfig.default()
    if order not in (1, 2):
        raise ConfigurationError(f"order must be 1 or 2, got {order}")
    for kind in KINDS:
        if kind not in cfg.ranges:
            raise ConfigurationError(f"no configured range for kind {kind!r}")
    rng = np.random.default_rng(int(rng_seed))
    stages = []
    for o in range(1, order + 1):
        for kind in ORDER_TEMPLATE:
            params = _draw_params(kind, cfg, rng)
            sev = severity_bin(kind, params[cfg.primary[kind]], cfg)
            stages.append(DegradationStage(kind, params, sev, order=o))
    params = _draw_params("video_compression", cfg, rng)
    sev = severity_bin("video_compression", params[cfg.primary["video_compression"]], cfg)
    stages.append(DegradationStage("video_compression", params, sev, order=order))
    record = DegradationRecord(stages=stages, seed=int(rng_seed), order=order)
    record.text = render_degradation_text(record)
    return record


# --------------------------------------------------------------------------- text

def _kind_words(kind):
    return kind.replace("_", " ")


def render_degradation_text(record: DegradationRecord) -> str:
    """Render ``"<severity> <kind>"`` phrases in application order, comma separated."""
    return ", ".join(f"{s.severity} {_kind_words(s.kind)}" for s in record.stages)


def parse_degradation_text(text: str) -> list[tuple[str, str]]:
    """Inverse of :func:`render_degradation_text`: list of ``(severity, kind)``."""
    if not text.strip():
        return []
    out = []
    for phrase in text.split(","):
        words = phrase.strip().split()
        if len(words) < 2 or words[0] not in SEVERITIES:
            raise ValueError(f"cannot parse degradation phrase {phrase!r}")
        kind = "_".join(words[1:])
        if kind not in KINDS:
            raise ValueError(f"unknown degradation kind in phrase {phrase!r}")
        out.append((words[0], kind))
    return out


# ------------------------------------------------------------------------ kernels

def gaussian_kernel(sigma: float, aspect: float = 1.0, angle: float = 0.0, max_radius: int = 10) -> np.ndarray:
    """Normalized (an)isotropic gaussian kernel; ``sigma == 0`` gives a 1x1 identity."""
    if sigma < 0:
        raise RangeError(f"blur sigma must be non-negative, got {sigma}")
    radius = int(min(max_radius, np.ceil(3.0 * sigma)))
    if sigma == 0 or radius == 0:
        return np.ones((1, 1), dtype=np.float32)
    sx, sy = sigma, max(sigma * aspect, 1e-6)
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    cov = rot @ np.diag([sx**2, sy**2]) @ rot.T
    inv = np.linalg.inv(cov)
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    xx, yy = np.meshgrid(ax, ax)
    pts = np.stack([xx, yy], -1)
    k = np.exp(-0.5 * np.einsum("...i,ij,...j->...", pts, inv, pts))
    return (k / k.sum()).astype(np.float32)


def _per_frame_hwc(frames, fn):
    out = []
    for f in frames:
        hwc = np.ascontiguousarray(np.transpose(f, (1, 2, 0)))
        r = fn(hwc)
        if r.ndim == 2:
            r = r[:, :, None]
        out.append(np.transpose(r, (2, 0, 1)))
    return np.stack(out).astype(np.float32)


def _blur(frames, p):
    k = gaussian_kernel(float(p.get("sigma", 0.0)), float(p.get("aspect", 1.0)), float(p.get("angle", 0.0)))
    if k.shape == (1, 1):
        return frames.copy()
    return _per_frame_hwc(frames, lambda im: cv2.filter2D(im, -1, k, borderType=cv2.BORDER_REFLECT_101))


def _resize(frames, p, min_size=8):
    factor = float(p.get("factor", 1.0))
    if factor <= 0:
        raise RangeError(f"resize factor must be positive, got {factor}")
    h, w = frames.shape[-2:]
    nh, nw = int(round(h / factor)), int(round(w / factor))
    if nh < min_size or nw < min_size:
        raise DegenerateSizeError(f"resize to {nh}x{nw} is below the minimum of {min_size} pixels")
    if (nh, nw) == (h, w):
        return frames.copy()
    mode = _RESIZE_MODES[int(p.get("mode", 2))]
    return _per_frame_hwc(frames, lambda im: cv2.resize(im, (nw, nh), interpolation=mode))


def _noise(frames, p, rng):
    sigma = float(p.get("sigma", 0.0))
    if sigma <= 0:
        return frames.copy()
    if int(p.get("poisson", 0)):
        # variance x/k equals sigma^2 at x = 0.5
        k = 0.5 / sigma**2
        return (rng.poisson(frames.astype(np.float64) * k) / k).astype(np.float32)
    return (frames + rng.normal(0.0, sigma, frames.shape)).astype(np.float32)


def _jpeg(frames, p):
    quality = int(p.get("quality", 95))

    def codec(im):
        u8 = np.clip(np.rint(im * 255.0), 0, 255).astype(np.uint8)
        if u8.shape[2] == 3:
            u8 = cv2.cvtColor(u8, cv2.COLOR_RGB2BGR)
        ok, buf = cv2.imencode(".jpg", u8, [int(cv2.IMWRITE_JPEG_QUALITY), quality])
        if not ok:
            raise RuntimeError("jpeg encoding failed")
        dec = cv2.imdecode(buf, cv2.IMREAD_UNCHANGED)
        if dec.ndim == 3:
            dec = cv2.cvtColor(dec, cv2.COLOR_BGR2RGB)
        return dec.astype(np.float32) / 255.0

    return _per_frame_hwc(frames, codec)


def _blockwise(x, fn):
    c, h, w = x.shape
    ph, pw = (-h) % 8, (-w) % 8
    xp = np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="edge")
    H, W = xp.shape[1:]
    blocks = xp.reshape(c, H // 8, 8, W // 8, 8)
    blocks = fn(blocks)
    return blocks.reshape(c, H, W)[:, :h, :w]


def _video_compression(frames, p):
    """Intra-code the first frame, then residuals against the previous reconstruction.

    Every frame uses the same block-DCT quantization step table.
    """
    step = float(p.get("strength", 1.0)) * _JPEG_LUMA / 255.0
    step = step[None, None, :, None, :]

    def quant(blocks):
        coef = scipy.fft.dctn(blocks, axes=(2, 4), norm="ortho")
        coef = np.round(coef / step) * step
        return scipy.fft.idctn(coef, axes=(2, 4), norm="ortho")

    out = np.empty_like(frames, dtype=np.float64)
    prev = None
    for i, f in enumerate(frames.astype(np.float64)):
        if prev is None:
            rec = _blockwise(f - 0.5, quant) + 0.5
        else:
            rec = prev + _blockwise(f - prev, quant)
        rec = np.clip(rec, 0.0, 1.0)
        out[i] = rec
        prev = rec
    return out.astype(np.float32)


def apply_stage(clip: VideoClip, stage: DegradationStage, rng: np.random.Generator | None = None,
                min_size: int = 8) -> VideoClip:
    """Apply one degradation stage to every frame of ``clip``; output clamped to [0, 1]."""
    frames = clip.frames
    p = stage.params
    if stage.kind == "blur":
        out = _blur(frames, p)
    elif stage.kind == "resize":
        out = _resize(frames, p, min_size)
    elif stage.kind == "noise":
        if rng is None:
            raise ConfigurationError("noise stage requires an explicit rng")
        out = _noise(frames, p, rng)
    elif stage.kind == "jpeg":
        out = _jpeg(frames, p)
    elif stage.kind == "video_compression":
        out = _video_compression(frames, p)
    else:
        raise ConfigurationError(f"unknown degradation kind {stage.kind!r}")
    return clip.with_frames(np.clip(out, 0.0, 1.0))


def bicubic_resize(frames: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Antialiased bicubic resize of ``(n, c, h, w)`` frames to ``size = (h, w)``."""
    h, w = size
    out = np.empty(frames.shape[:2] + (h, w), dtype=np.float32)
    for i in range(frames.shape[0]):
        for c in range(frames.shape[1]):
            im = Image.fromarray(np.ascontiguousarray(frames[i, c], dtype=np.float32), mode="F")
            out[i, c] = np.asarray(im.resize((w, h), Image.BICUBIC), dtype=np.float32)
    return out


def stage_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def degrade_clip(hr: VideoClip, record: DegradationRecord, downscale: int = 4, min_size: int = 8) -> VideoClip:
    """Apply every stage of ``record`` then bicubic-downsample by ``downscale``."""
    n, c, h, w = hr.shape
    if downscale < 1 or h % downscale or w % downscale:
        raise ShapeError(f"clip size {h}x{w} is not divisible by downscale {downscale}")
    clip = hr
    for i, stage in enumerate(record.stages):
        clip = apply_stage(clip, stage, stage_rng(record.seed, i), min_size=min_size)
    lr = np.clip(bicubic_resize(clip.frames, (h // downscale, w // downscale)), 0.0, 1.0)
    return VideoClip(lr, hr.id, hr.fps, {"degradation_seed": record.seed})


# ------------------------------------------------------------------- noise mixing

class NoiseBank:
    """Collection of noise patches treated as zero-mean residuals.

    Patches are ``(c, h, w)`` float arrays, typically loaded from PNG files.
    """

    def __init__(self, patches: Sequence[np.ndarray] = ()):
        self.patches = [np.asarray(p, dtype=np.float32) for p in patches]

    @classmethod
    def from_directory(cls, path):
        from .io import read_image

        files = sorted(Path(path).glob("*.png"))
        return cls([read_image(f) for f in files])

    def __len__(self):
        return len(self.patches)

    def sample(self, rng: np.random.Generator):
        if not self.patches:
            raise ConfigurationError("noise bank is empty")
        idx = int(rng.integers(len(self.patches)))
        return idx, self.patches[idx]


def mix_noise(lr: VideoClip, noise_patch, lam: float, rng: np.random.Generator) -> VideoClip:
    """Blend a mean-removed noise patch into ``lr``: ``clamp(lr + lam * (p - mean(p)))``.

    The patch is tiled when smaller than the frame and cropped at an
    rng-drawn offset recorded in ``meta["noise_offset"]``. A single-frame
    patch is shared by all frames; a multi-frame patch cycles.
    """
    if not 0.0 <= lam <= 1.0:
        raise RangeError(f"mixing ratio must lie in [0, 1], got {lam}")
    if isinstance(noise_patch, NoiseBank):
        _, noise_patch = noise_patch.sample(rng)
    p = noise_patch.frames if isinstance(noise_patch, VideoClip) else np.asarray(noise_patch, dtype=np.float32)
    if p.size == 0:
        raise ConfigurationError("noise patch is empty")
    if p.ndim == 3:
        p = p[None]
    n, c, h, w = lr.shape
    if p.shape[1] not in (1, c):
        raise ShapeError(f"noise patch has {p.shape[1]} channels, clip has {c}")
    mean = p.mean(dtype=np.float64)
    reps = (1, 1, -(-(h + 1) // p.shape[2]) + 1, -(-(w + 1) // p.shape[3]) + 1)
    tiled = np.tile(p, reps)
    oy = int(rng.integers(tiled.shape[2] - h + 1))
    ox = int(rng.integers(tiled.shape[3] - w + 1))
    crop = tiled[:, :, oy:oy + h, ox:ox + w]
    residual = (crop - mean).astype(np.float32)
    idx = np.arange(n) % residual.shape[0]
    if lam == 0.0:
        out = lr.frames.copy()
    else:
        out = np.clip(lr.frames + np.float32(lam) * residual[idx], 0.0, 1.0)
    return lr.with_frames(out, noise_offset=(oy, ox), noise_lambda=float(lam))
