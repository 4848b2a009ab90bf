import numpy as np
import pytest
import torch

from textovsr.degrade import VideoClip


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def textured_clip(n=3, h=32, w=32, c=3, seed=0, clip_id="clip"):
    """Smooth moving blobs plus mild texture; deterministic."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    frames = []
    centers = rng.uniform(0, 1, size=(4, 2)) * [h, w]
    colors = rng.uniform(0.2, 0.9, size=(4, c))
    phase = rng.uniform(0, 2 * np.pi, size=c)
    for t in range(n):
        img = np.zeros((c, h, w), np.float32) + 0.3
        for (cy, cx), col in zip(centers, colors):
            g = np.exp(-(((yy - cy - t) ** 2 + (xx - cx - 1.5 * t) ** 2) / (2 * (0.15 * h) ** 2)))
            img += 0.5 * col[:, None, None] * g
        for ch in range(c):
            img[ch] += 0.08 * np.sin(0.6 * xx + 0.4 * yy + phase[ch] + 0.5 * t)
        frames.append(np.clip(img, 0, 1))
    return VideoClip(np.stack(frames), clip_id)


@pytest.fixture
def clip():
    return textured_clip()


def make_pair(seed=0, n=3, hr=32, clip_id=None):
    """Degraded HR/LR pair with template captions and hash embeddings."""
    from textovsr.degrade import degrade_clip, sample_pipeline
    from textovsr.prompts import HashTextEncoder, TemplateCaptioner, build_prompt_pack
    from textovsr.train import ClipPair

    cid = clip_id or f"clip{seed:03d}"
    hr_clip = textured_clip(n, hr, hr, seed=seed, clip_id=cid)
    rec = sample_pipeline(seed)
    lr_clip = degrade_clip(hr_clip, rec)
    pack = build_prompt_pack(hr_clip, rec, TemplateCaptioner(), HashTextEncoder())
    return ClipPair(hr_clip, lr_clip, rec, pack)


def make_dataset(n_clips=2, n=3, hr=32):
    from textovsr.degrade import NoiseBank
    from textovsr.pipeline import synthetic_noise_patches
    from textovsr.train import PairedClipDataset

    return PairedClipDataset([make_pair(i, n, hr) for i in range(n_clips)],
                             NoiseBank(synthetic_noise_patches(2, 16)))


def tiny_config(**kw):
    from textovsr.generator import GeneratorConfig
    from textovsr.ted import TedConfig
    from textovsr.train import TrainConfig, build_ablation

    variant = kw.pop("variant", "V6")
    base = dict(iterations=4, stage2_iterations=2, num_frames=3, lr_crop=8, batch_size=2,
                generator=GeneratorConfig(channels=8, num_blocks=1, d_text=64),
                discriminator=TedConfig(base_channels=4, depth=2, text_width=4))
    base.update(kw)
    return build_ablation(TrainConfig(**base), variant)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acceptance_log.RESULTS):
            terminalreporter.write_line(acceptance_log.RESULTS[n])
