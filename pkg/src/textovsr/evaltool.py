"""Reference and no-reference metrics, versioned reports, and checkpoint evaluation."""
from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import gamma as gamma_fn
from skimage.metrics import structural_similarity

from .exceptions import ConfigurationError, DatasetError, DegenerateSizeError, ShapeError, VersioningError
from .io import read_clip_dir, write_image
from .prompts import PromptPack

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
REPORT_VERSION = "1.0"
NR_MIN_SIZE = 96
NR_PARAMS_FILE = "naturalness_params.json"
NR_MANIFEST_FILE = "manifest.json"
METRICS = ("psnr", "ssim", "nr")


def _hwc(x):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] in (1, 3) and a.shape[-1] not in (1, 3):
        a = a.transpose(1, 2, 0)
    return a


def psnr(a, b, data_range=1.0):
    """Peak signal-to-noise ratio in dB; identical inputs give the capped sentinel."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr inputs differ in shape: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(data_range**2 / mse)))


def ssim(a, b, data_range=1.0):
    """Structural similarity of two ``(c, h, w)`` or ``(h, w)`` frames."""
    a, b = _hwc(a), _hwc(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim inputs differ in shape: {a.shape} vs {b.shape}")
    side = min(a.shape[:2])
    win = min(7, side if side % 2 else side - 1)
    if win < 3:
        raise DegenerateSizeError(f"ssim needs frames of at least 3x3, got {a.shape[:2]}")
    channel_axis = 2 if a.ndim == 3 else None
    return float(structural_similarity(a, b, data_range=data_range, channel_axis=channel_axis, win_size=win))


# ------------------------------------------------------------ MSCN statistics

_GAMMAS = np.arange(0.2, 10.0, 0.001)
_R_GGD = gamma_fn(1 / _GAMMAS) * gamma_fn(3 / _GAMMAS) / gamma_fn(2 / _GAMMAS) ** 2


def to_gray255(frame):
    a = np.asarray(frame, dtype=np.float64)
    if a.ndim == 3:
        if a.shape[0] == 3:
            a = 0.299 * a[0] + 0.587 * a[1] + 0.114 * a[2]
        elif a.shape[0] == 1:
            a = a[0]
        else:
            raise ShapeError(f"expected (c, h, w) frame, got {a.shape}")
    elif a.ndim != 2:
        raise ShapeError(f"expected a 2-D or 3-D frame, got {a.shape}")
    return a * 255.0


def mscn(gray):
    mu = cv2.GaussianBlur(gray, (7, 7), 7 / 6, borderType=cv2.BORDER_REPLICATE)
    var = cv2.GaussianBlur(gray * gray, (7, 7), 7 / 6, borderType=cv2.BORDER_REPLICATE) - mu * mu
    return (gray - mu) / (np.sqrt(np.abs(var)) + 1.0)


def fit_ggd(x):
    x = x.ravel()
    sigma_sq = np.mean(x**2)
    e_abs = np.mean(np.abs(x))
    rho = sigma_sq / (e_abs**2 + 1e-12)
    return _GAMMAS[np.argmin(np.abs(rho - _R_GGD))], sigma_sq


def fit_aggd(x):
    x = x.ravel()
    left, right = x[x < 0], x[x >= 0]
    sl = np.sqrt(np.mean(left**2)) if left.size else 1e-6
    sr = np.sqrt(np.mean(right**2)) if right.size else 1e-6
    g_hat = sl / max(sr, 1e-12)
    r_hat = np.mean(np.abs(x)) ** 2 / (np.mean(x**2) + 1e-12)
    rn = r_hat * (g_hat**3 + 1) * (g_hat + 1) / (g_hat**2 + 1) ** 2
    alpha = _GAMMAS[np.argmin(np.abs(rn - 1 / _R_GGD))]
    ratio = gamma_fn(2 / alpha) / np.sqrt(gamma_fn(1 / alpha) * gamma_fn(3 / alpha))
    mean = (sr - sl) * ratio
    return alpha, mean, sl**2, sr**2


def patch_features(m):
    """18 statistics of one MSCN patch: GGD shape/variance plus 4 paired-product AGGD fits."""
    feats = list(fit_ggd(m))
    shifts = [m[:, :-1] * m[:, 1:], m[:-1, :] * m[1:, :], m[:-1, :-1] * m[1:, 1:], m[1:, :-1] * m[:-1, 1:]]
    for s in shifts:
        feats.extend(fit_aggd(s))
    return feats


def frame_features(frame, patch=32, scales=2):
    """Per-patch MSCN features stacked over ``scales`` dyadic scales, ``(patches, 18 * scales)``."""
    gray = to_gray255(frame)
    h, w = gray.shape
    if min(h, w) < NR_MIN_SIZE:
        raise DegenerateSizeError(f"naturalness metric needs frames of at least {NR_MIN_SIZE}px, got {h}x{w}")
    ny, nx = h // patch, w // patch
    gray = gray[: ny * patch, : nx * patch]
    per_scale = []
    p = patch
    for s in range(scales):
        if s:
            gray = cv2.resize(gray, (gray.shape[1] // 2, gray.shape[0] // 2), interpolation=cv2.INTER_CUBIC)
            p //= 2
        m = mscn(gray)
        rows = [patch_features(m[i * p:(i + 1) * p, j * p:(j + 1) * p]) for i in range(ny) for j in range(nx)]
        per_scale.append(np.asarray(rows))
    return np.concatenate(per_scale, axis=1)


def fit_naturalness_params(frames, patch=32, scales=2, sharpness_quantile=0.25):
    """Fit the pristine multivariate Gaussian on patches of clean frames.

    Patches whose local contrast falls below ``sharpness_quantile`` of the
    pool are dropped so flat regions do not dominate the model.
    """
    feats, sharp = [], []
    for f in frames:
        gray = to_gray255(f)
        sd = np.sqrt(np.abs(cv2.GaussianBlur(gray * gray, (7, 7), 7 / 6)
                            - cv2.GaussianBlur(gray, (7, 7), 7 / 6) ** 2))
        h, w = gray.shape
        ny, nx = h // patch, w // patch
        sharp.extend(sd[i * patch:(i + 1) * patch, j * patch:(j + 1) * patch].mean()
                     for i in range(ny) for j in range(nx))
        feats.append(frame_features(f, patch, scales))
    feats = np.concatenate(feats)
    keep = np.asarray(sharp) >= np.quantile(sharp, sharpness_quantile)
    feats = feats[keep]
    return {
        "version": 1,
        "patch": patch,
        "scales": scales,
        "count": int(feats.shape[0]),
        "mu": feats.mean(0).tolist(),
        "cov": np.cov(feats, rowvar=False).tolist(),
    }


def save_naturalness_params(params, directory):
    """Write the parameter file and a sha256 manifest next to it."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = json.dumps(params, sort_keys=True).encode()
    (directory / NR_PARAMS_FILE).write_bytes(blob)
    manifest = {NR_PARAMS_FILE: hashlib.sha256(blob).hexdigest()}
    (directory / NR_MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


@dataclass(frozen=True)
class NaturalnessParams:
    mu: np.ndarray
    cov: np.ndarray
    patch: int
    scales: int
    sha256: str

    @classmethod
    def load(cls, directory=None):
        """Load and hash-check the parameter file (shipped package data by default)."""
        if directory is None:
            base = resources.files("textovsr") / "data"
            blob = (base / NR_PARAMS_FILE).read_bytes()
            manifest = json.loads((base / NR_MANIFEST_FILE).read_text())
        else:
            directory = Path(directory)
            blob = (directory / NR_PARAMS_FILE).read_bytes()
            manifest = json.loads((directory / NR_MANIFEST_FILE).read_text())
        digest = hashlib.sha256(blob).hexdigest()
        if manifest.get(NR_PARAMS_FILE) != digest:
            raise VersioningError(f"{NR_PARAMS_FILE} hash {digest[:12]} does not match the manifest")
        d = json.loads(blob)
        if int(d.get("version", 0)) != 1:
            raise VersioningError(f"unsupported naturalness parameter version {d.get('version')}")
        return cls(np.asarray(d["mu"]), np.asarray(d["cov"]), int(d["patch"]), int(d["scales"]), digest)


@lru_cache(maxsize=1)
def _default_params():
    return NaturalnessParams.load()


def nr_naturalness(frame, params: Optional[NaturalnessParams] = None):
    """MSCN-statistics distance to the pristine model; lower is more natural.

    Args:
        frame: ``(c, h, w)`` or ``(h, w)`` array in [0, 1], at least 96px per side.
        params: reference model; defaults to the shipped, hash-verified file.
    """
    params = params or _default_params()
    feats = frame_features(frame, params.patch, params.scales)
    mu_t = feats.mean(0)
    cov_t = np.cov(feats, rowvar=False) if feats.shape[0] > 1 else np.zeros_like(params.cov)
    d = params.mu - mu_t
    pooled = (params.cov + cov_t) / 2
    return float(np.sqrt(max(d @ np.linalg.pinv(pooled) @ d, 0.0)))


# ------------------------------------------------------------------- reports

@dataclass
class MetricReport:
    per_frame: dict
    per_video: dict
    config_hash: str
    checkpoint_id: str
    clips: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)
    version: str = REPORT_VERSION

    @classmethod
    def from_frames(cls, per_clip, config_hash, checkpoint_id, skipped=()):
        """Assemble from ``{clip: {metric: [values]}}`` in sorted clip order."""
        per_frame = {}
        for cid in sorted(per_clip):
            for m, vals in per_clip[cid].items():
                per_frame.setdefault(m, []).extend(float(v) for v in vals)
        per_video = {m: float(np.mean(v)) for m, v in per_frame.items()}
        clips = {cid: {m: float(np.mean(v)) for m, v in per_clip[cid].items()} for cid in sorted(per_clip)}
        return cls(per_frame, per_video, config_hash, checkpoint_id, clips, list(skipped))

    def to_dict(self):
        return {
            "version": self.version,
            "config_hash": self.config_hash,
            "checkpoint_id": self.checkpoint_id,
            "per_frame": self.per_frame,
            "per_video": self.per_video,
            "clips": self.clips,
            "skipped": self.skipped,
        }

    def save(self, path):
        path = Path(path)
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)


def load_report(path):
    d = json.loads(Path(path).read_text())
    major = str(d.get("version", "0")).split(".")[0]
    if major != REPORT_VERSION.split(".")[0]:
        raise VersioningError(f"report major version {d.get('version')} is not supported")
    return MetricReport(d["per_frame"], d["per_video"], d["config_hash"], d["checkpoint_id"],
                        d.get("clips", {}), d.get("skipped", []), d["version"])


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalClip:
    id: str
    lr: np.ndarray
    hr: Optional[np.ndarray] = None
    content_embeddings: Optional[np.ndarray] = None


def load_eval_clips(root):
    """Clips under ``root/clips``; ``hr/`` and prompt sidecars are optional."""
    root = Path(root)
    dirs = sorted(p for p in (root / "clips").glob("*") if p.is_dir())
    if not dirs:
        raise DatasetError(f"no clips under {root / 'clips'}")
    out = []
    for d in dirs:
        lr = read_clip_dir(d / "lr", d.name).frames
        hr = read_clip_dir(d / "hr", d.name).frames if (d / "hr").is_dir() else None
        emb = PromptPack.load(d).content_embeddings if (d / "prompts.json").exists() else None
        out.append(EvalClip(d.name, lr, hr, emb))
    return out


def _as_eval_clips(dataset):
    if isinstance(dataset, (str, os.PathLike)):
        return load_eval_clips(dataset)
    if hasattr(dataset, "pairs"):
        return [EvalClip(p.hr.id, p.lr.frames, p.hr.frames, p.pack.content_embeddings) for p in dataset.pairs]
    return list(dataset)


def bicubic_upscale(lr, scale=4):
    t = torch.as_tensor(np.asarray(lr, np.float32))
    return F.interpolate(t, scale_factor=scale, mode="bicubic", align_corners=False).clamp(0, 1).numpy()


class BicubicModel:
    checkpoint_id = "bicubic"
    config_hash = "bicubic"

    def __init__(self, scale=4):
        self.scale = scale

    def __call__(self, clip: EvalClip):
        return bicubic_upscale(clip.lr, self.scale)


class GeneratorModel:
    def __init__(self, generator, config_hash="", checkpoint_id="", chunk_size=None):
        self.generator = generator.eval()
        self.config_hash = config_hash
        self.checkpoint_id = checkpoint_id
        self.chunk_size = chunk_size

    def __call__(self, clip: EvalClip):
        emb = clip.content_embeddings
        if emb is None:
            logger.warning("clip %s has no prompts; using the null prompt", clip.id)
        return self.generator.infer(torch.from_numpy(np.asarray(clip.lr, np.float32)), emb,
                                    chunk_size=self.chunk_size, clip_ids=[clip.id]).numpy()


def resolve_model(model_ckpt, chunk_size=None):
    if model_ckpt == "bicubic":
        return BicubicModel()
    if hasattr(model_ckpt, "infer"):
        return GeneratorModel(model_ckpt, chunk_size=chunk_size)
    if callable(model_ckpt) and not isinstance(model_ckpt, (str, os.PathLike)):
        return model_ckpt
    from .train import load_generator

    gen, config, ckpt_id = load_generator(model_ckpt)
    return GeneratorModel(gen, config.digest(), ckpt_id or "", chunk_size)


def comparison_strip(lr, sr, hr=None):
    """LR (nearest-upscaled) | SR | HR side by side for one frame."""
    h, w = sr.shape[-2:]
    lr_up = np.repeat(np.repeat(lr, h // lr.shape[-2], axis=-2), w // lr.shape[-1], axis=-1)
    panels = [lr_up, sr] + ([hr] if hr is not None else [])
    return np.concatenate(panels, axis=-1)


def _clip_metrics(clip, sr, metrics, skipped):
    res = {}
    for m in metrics:
        if m in ("psnr", "ssim"):
            if clip.hr is None:
                skipped.append({"clip": clip.id, "metric": m, "reason": "no HR reference"})
                continue
            fn = psnr if m == "psnr" else ssim
            res[m] = [fn(s, h) for s, h in zip(sr, clip.hr)]
        else:
            try:
                res[m] = [nr_naturalness(s) for s in sr]
            except DegenerateSizeError as e:
                skipped.append({"clip": clip.id, "metric": m, "reason": str(e)})
    return res


def evaluate(model_ckpt, dataset, metrics=METRICS, out=None, workers=1, chunk_size=None) -> MetricReport:
    """Run the model per clip, compute ``metrics`` and optionally write ``report.json`` and strips.

    Args:
        model_ckpt: checkpoint path, ``"bicubic"``, a generator, or a callable on ``EvalClip``.
        dataset: dataset root, ``PairedClipDataset`` or a list of ``EvalClip``.
        metrics: subset of ``("psnr", "ssim", "nr")``.
        out: output directory; nothing is written unless every clip succeeded.
        workers: clip-level threads; results are assembled in clip order.
    """
    metrics = tuple(metrics)
    bad = [m for m in metrics if m not in METRICS]
    if bad:
        raise ConfigurationError(f"unknown metrics {bad}; expected a subset of {METRICS}")
    if isinstance(model_ckpt, (str, os.PathLike)) and model_ckpt != "bicubic" and not Path(model_ckpt).exists():
        raise FileNotFoundError(f"checkpoint not found: {model_ckpt}")
    model = resolve_model(model_ckpt, chunk_size)
    clips = _as_eval_clips(dataset)

    def run(clip):
        skipped = []
        sr = model(clip)
        return clip.id, sr, _clip_metrics(clip, sr, metrics, skipped), skipped

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(run, clips))
    else:
        results = [run(c) for c in clips]

    per_clip = {cid: res for cid, _, res, _ in results}
    skipped = [s for *_, sk in results for s in sk]
    report = MetricReport.from_frames(per_clip, getattr(model, "config_hash", ""),
                                      getattr(model, "checkpoint_id", ""), skipped)
    if out is not None:
        out = Path(out)
        (out / "strips").mkdir(parents=True, exist_ok=True)
        by_id = {c.id: c for c in clips}
        for cid, sr, _, _ in results:
            c = by_id[cid]
            mid = len(sr) // 2
            write_image(out / "strips" / f"{cid}.png",
                        comparison_strip(c.lr[mid], sr[mid], None if c.hr is None else c.hr[mid]))
        report.save(out / "report.json")
    return report
