"""scikit-learn style facades over degradation synthesis and the super-resolution model."""
from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .degrade import DegradationConfig, NoiseBank, VideoClip, degrade_clip, sample_pipeline
from .evaltool import psnr
from .exceptions import ShapeError
from .generator import GeneratorConfig
from .losses import LossWeights
from .pipeline import synthetic_noise_patches
from .prompts import EmbeddingCache, HashTextEncoder, PromptPack, TemplateCaptioner, caption_clip, encode
from .train import ClipPair, PairedClipDataset, TrainConfig, build_ablation, run_stage1, run_stage2, save_checkpoint
from .validation import check_clip_array


def _as_batch(X, name="X"):
    """Return a float32 ``(b, n, c, h, w)`` array from clips, a clip list or an array."""
    if isinstance(X, VideoClip):
        return X.frames[None]
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], VideoClip):
        shapes = {c.shape for c in X}
        if len(shapes) != 1:
            raise ShapeError(f"{name}: clips must share one shape, got {sorted(shapes)}")
        return np.stack([c.frames for c in X])
    arr = check_clip_array(X, allow_batch=True, name=name)
    return arr[None] if arr.ndim == 4 else arr


class HighOrderDegrader(TransformerMixin, BaseEstimator):
    """Sample one high-order pipeline per clip and return the degraded LR clips.

    Args:
        order: number of base-chain repetitions (1 or 2).
        downscale: final downsampling factor.
        seed: master seed; clip ``i`` uses a seed derived from ``(seed, i)``.
        config_path: optional YAML file overriding the shipped parameter ranges.
    """

    def __init__(self, order=2, downscale=4, seed=0, config_path=None):
        self.order = order
        self.downscale = downscale
        self.seed = seed
        self.config_path = config_path

    def fit(self, X, y=None):
        batch = _as_batch(X)
        self.config_ = DegradationConfig.from_file(self.config_path) if self.config_path else DegradationConfig.default()
        self.n_frames_in_ = batch.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        batch = _as_batch(X)
        self.records_ = []
        out = []
        for i, frames in enumerate(batch):
            seed = int(np.random.SeedSequence([self.seed, i]).generate_state(1)[0])
            rec = sample_pipeline(seed, self.order, self.config_)
            self.records_.append(rec)
            out.append(degrade_clip(VideoClip(frames, f"clip{i:03d}"), rec, self.downscale,
                                    self.config_.min_size).frames)
        return np.stack(out)


class TextOVSRRegressor(RegressorMixin, BaseEstimator):
    """Fit the text-guided video SR generator on in-memory LR/HR clip batches.

    Captions are produced by the template captioner from HR frames during
    ``fit`` and from LR frames during ``predict`` unless texts are given.
    ``score`` returns mean PSNR in dB rather than R^2.
    """

    def __init__(self, channels=16, num_blocks=2, variant="V6", iterations=200, stage2_iterations=0,
                 learning_rate=1e-4, stage2_learning_rate=5e-5, batch_size=2, num_frames=None, lr_crop=None,
                 lambda_mix=0.5, d_text=64, granularity="fine", seed=0):
        self.channels = channels
        self.num_blocks = num_blocks
        self.variant = variant
        self.iterations = iterations
        self.stage2_iterations = stage2_iterations
        self.learning_rate = learning_rate
        self.stage2_learning_rate = stage2_learning_rate
        self.batch_size = batch_size
        self.num_frames = num_frames
        self.lr_crop = lr_crop
        self.lambda_mix = lambda_mix
        self.d_text = d_text
        self.granularity = granularity
        self.seed = seed

    def _texts_to_embeddings(self, frames, texts):
        clip = VideoClip(frames)
        if texts is None:
            texts = caption_clip(clip, TemplateCaptioner(self.granularity))
        if len(texts) != len(clip):
            raise ShapeError(f"{len(texts)} captions for {len(clip)} frames")
        return texts, np.stack(encode(list(texts), self.encoder_, self.cache_))

    def _config(self, n, lr_side):
        cfg = TrainConfig(
            seed=self.seed, iterations=self.iterations, stage2_iterations=self.stage2_iterations,
            lr_stage1=self.learning_rate, lr_stage2=self.stage2_learning_rate, batch_size=self.batch_size,
            num_frames=self.num_frames or n, lr_crop=self.lr_crop or lr_side,
            weights=LossWeights(lambda_mix=self.lambda_mix),
            generator=GeneratorConfig(channels=self.channels, num_blocks=self.num_blocks, d_text=self.d_text),
        )
        return build_ablation(cfg, self.variant)

    def fit(self, X, y, content_texts=None, degradation_texts=None):
        """Args:
            X: LR clips ``(b, n, 3, h, w)``.
            y: HR clips ``(b, n, 3, 4h, 4w)``.
            content_texts: optional per-clip lists of per-frame captions.
            degradation_texts: optional per-clip degradation descriptions.
        """
        lr, hr = _as_batch(X, "X"), _as_batch(y, "y")
        if lr.shape[:3] != hr.shape[:3] or hr.shape[-2:] != (lr.shape[-2] * 4, lr.shape[-1] * 4):
            raise ShapeError(f"y {hr.shape} is not the x4 counterpart of X {lr.shape}")
        self.encoder_ = HashTextEncoder(self.d_text, seed=self.seed)
        self.cache_ = EmbeddingCache()
        pairs = []
        for i in range(lr.shape[0]):
            texts, emb = self._texts_to_embeddings(hr[i], None if content_texts is None else content_texts[i])
            deg_text = None if degradation_texts is None else degradation_texts[i]
            deg_emb = None if deg_text is None else encode([deg_text], self.encoder_, self.cache_)[0]
            pack = PromptPack(list(texts), emb, self.d_text, deg_text, deg_emb)
            cid = f"clip{i:03d}"
            pairs.append(ClipPair(VideoClip(hr[i], cid), VideoClip(lr[i], cid), None, pack))
        bank = NoiseBank(synthetic_noise_patches(seed=self.seed)) if self.lambda_mix > 0 else None
        dataset = PairedClipDataset(pairs, bank)
        self.config_ = self._config(lr.shape[1], min(lr.shape[-2:]))
        state = run_stage1(self.config_, dataset)
        if self.stage2_iterations:
            with tempfile.TemporaryDirectory() as tmp:
                ckpt = Path(tmp) / "stage1.pt"
                save_checkpoint(ckpt, state)
                state = run_stage2(self.config_, dataset, ckpt)
        self.state_ = state
        self.generator_ = state.generator.eval()
        self.loss_log_ = list(state.log)
        self.n_iter_ = state.iteration
        return self

    def predict(self, X, content_texts=None, chunk_size=None):
        check_is_fitted(self, "generator_")
        lr = _as_batch(X, "X")
        out = []
        for i in range(lr.shape[0]):
            _, emb = self._texts_to_embeddings(lr[i], None if content_texts is None else content_texts[i])
            out.append(self.generator_.infer(torch.from_numpy(lr[i]), emb, chunk_size=chunk_size).numpy())
        return np.stack(out)

    def score(self, X, y, sample_weight=None):
        """Mean per-frame PSNR (dB) of predictions against ``y``."""
        pred = self.predict(X)
        hr = _as_batch(y, "y")
        vals = np.array([psnr(p, h) for pc, hc in zip(pred, hr) for p, h in zip(pc, hc)])
        if sample_weight is None:
            return float(vals.mean())
        w = np.repeat(np.asarray(sample_weight, float), pred.shape[1])
        return float(np.average(vals, weights=w))
