"""Offline dataset steps over the ``clips/<id>/{hr,lr}`` root layout."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .degrade import DegradationConfig, DegradationRecord, VideoClip, degrade_clip, sample_pipeline
from .exceptions import DatasetError
from .io import read_clip_dir, write_clip_dir, write_image
from .prompts import EmbeddingCache, build_prompt_pack

logger = logging.getLogger(__name__)


def clip_dirs(root):
    dirs = sorted(p for p in (Path(root) / "clips").glob("*") if p.is_dir())
    if not dirs:
        raise DatasetError(f"no clip directories under {Path(root) / 'clips'}")
    return dirs


def degrade_root(root, seed=0, config: DegradationConfig | None = None, downscale=4, overwrite=False):
    """Sample a pipeline per clip, write ``lr/`` frames and ``degradation.json``."""
    config = config or DegradationConfig.default()
    records = {}
    for i, d in enumerate(clip_dirs(root)):
        if (d / "degradation.json").exists() and not overwrite:
            records[d.name] = DegradationRecord.load(d / "degradation.json")
            continue
        hr = read_clip_dir(d / "hr", d.name)
        rec = sample_pipeline(int(np.random.SeedSequence([seed, i]).generate_state(1)[0]), config.order, config)
        lr = degrade_clip(hr, rec, downscale, config.min_size)
        write_clip_dir(d / "lr", lr)
        rec.save(d / "degradation.json")
        records[d.name] = rec
        logger.info("degraded %s: %s", d.name, rec.text)
    return records


def caption_root(root, provider, encoder, batch=7, cache=None):
    """Caption HR frames and write ``prompts.json`` / ``prompts.emb`` per clip."""
    cache = cache if cache is not None else EmbeddingCache()
    packs = {}
    for d in clip_dirs(root):
        hr = read_clip_dir(d / "hr", d.name)
        rec = DegradationRecord.load(d / "degradation.json") if (d / "degradation.json").exists() else None
        pack = build_prompt_pack(hr, rec, provider, encoder, batch, cache)
        pack.save(d)
        packs[d.name] = pack
    return packs


def synthetic_clip(n=7, h=64, w=64, seed=0, clip_id="clip", motion=(1.0, 0.5)):
    """Band-limited random texture translated by ``motion`` pixels per frame."""
    rng = np.random.default_rng(seed)
    pad = int(np.ceil(max(abs(motion[0]), abs(motion[1])) * n)) + 4
    H, W = h + 2 * pad, w + 2 * pad
    base = np.stack([gaussian_filter(rng.normal(size=(H, W)), 2.0) for _ in range(3)])
    detail = np.stack([gaussian_filter(rng.normal(size=(H, W)), 0.8) for _ in range(3)])
    tex = base / (base.std() + 1e-8) * 0.15 + detail / (detail.std() + 1e-8) * 0.05 + 0.5
    yy, xx = np.mgrid[0:H, 0:W]
    tex += 0.15 * (((yy // 12) + (xx // 12)) % 2)[None] - 0.075
    frames = []
    for t in range(n):
        dy, dx = int(round(motion[0] * t)), int(round(motion[1] * t))
        frames.append(tex[:, pad + dy:pad + dy + h, pad + dx:pad + dx + w])
    return VideoClip(np.clip(np.stack(frames), 0, 1).astype(np.float32), clip_id)


def synthetic_noise_patches(count=4, size=32, sigma=0.04, seed=0):
    rng = np.random.default_rng(seed)
    return [np.clip(0.5 + rng.normal(0, sigma, size=(3, size, size)), 0, 1).astype(np.float32)
            for _ in range(count)]


def write_synthetic_root(root, n_clips=2, frames=7, size=64, seed=0, noise_patches=4):
    """Create a small HR-only root (plus noise bank) for smoke runs and tests."""
    root = Path(root)
    for i in range(n_clips):
        write_clip_dir(root / "clips" / f"clip{i:03d}" / "hr",
                       synthetic_clip(frames, size, size, seed + i, f"clip{i:03d}"))
    for j, p in enumerate(synthetic_noise_patches(noise_patches, seed=seed)):
        write_image(root / "noise_bank" / f"{j:04d}.png", p)
    return root
