"""Training objectives for both stages.

Stage 1: ``rec + alpha * neg``. Stage 2 adds a perceptual term, a weighted
quality-score term ``beta * (1 - R(sr))`` and the text-conditioned
adversarial term.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ShapeError


@dataclass
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.5
    lambda_mix: float = 0.5
    charbonnier_eps: float = 1e-6
    neg_detach: str = "positive"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.neg_detach not in ("positive", "none"):
            raise ValueError(f"neg_detach must be 'positive' or 'none', got {self.neg_detach!r}")

    def to_dict(self):
        return asdict(self)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def rec_loss(sr, gt, eps=1e-6):
    """Charbonnier: ``mean(sqrt((sr - gt)^2 + eps^2))``."""
    _same_shape(sr, gt)
    return torch.sqrt((sr - gt) ** 2 + eps**2).mean()


def neg_loss(sr_pos, sr_neg, detach="positive"):
    """Mean absolute difference between branch outputs; positive side detached by default."""
    _same_shape(sr_pos, sr_neg)
    if detach == "positive":
        sr_pos = sr_pos.detach()
    return (sr_neg - sr_pos).abs().mean()


class ContrastQualityScorer(nn.Module):
    """Differentiable local-contrast proxy for a learned quality scorer.

    Score ``g / (g + g0)`` where ``g`` is the mean gradient magnitude of the
    luminance, so sharper frames score higher; output lies in [0, 1).
    """

    def __init__(self, g0=0.05):
        super().__init__()
        self.g0 = g0

    def forward(self, frames):
        x = frames.reshape(-1, *frames.shape[-3:])
        if x.shape[1] == 3:
            y = 0.299 * x[:, 0] + 0.587 * x[:, 1] + 0.114 * x[:, 2]
        else:
            y = x[:, 0]
        gx = y[:, :, 1:] - y[:, :, :-1]
        gy = y[:, 1:, :] - y[:, :-1, :]
        g = 0.5 * (torch.sqrt(gx**2 + 1e-8).mean(dim=(1, 2)) + torch.sqrt(gy**2 + 1e-8).mean(dim=(1, 2)))
        return g / (g + self.g0)


def clipiqa_loss(sr, scorer):
    """``1 - mean(R(frame))`` over every frame of ``sr``."""
    frames = sr.reshape(-1, *sr.shape[-3:])
    return 1.0 - scorer(frames).mean()


class RandomFeatureExtractor(nn.Module):
    """Frozen fixed-seed conv stack standing in for a pretrained perceptual network."""

    def __init__(self, widths=(16, 32, 32), layers=(0, 1, 2), seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        convs, cin = [], 3
        for i, w in enumerate(widths):
            conv = nn.Conv2d(cin, w, 3, 2 if i else 1, 1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) / conv.weight[0].numel() ** 0.5)
                conv.bias.zero_()
            convs.append(conv)
            cin = w
        self.convs = nn.ModuleList(convs)
        self.layers = tuple(layers)
        self.requires_grad_(False)

    def train(self, mode=True):
        return super().train(False)

    def forward(self, x):
        feats = []
        for i, conv in enumerate(self.convs):
            x = F.relu(conv(x))
            if i in self.layers:
                feats.append(x)
        return feats


class TorchvisionVGGExtractor(nn.Module):
    """Adapter for a torchvision VGG19 feature stack (weights must be available locally)."""

    def __init__(self, layers=(3, 8, 17, 26), weights="DEFAULT"):
        super().__init__()
        from torchvision.models import vgg19

        self.body = vgg19(weights=weights).features[: max(layers) + 1].eval()
        self.layers = tuple(layers)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.requires_grad_(False)

    def train(self, mode=True):
        return super().train(False)

    def forward(self, x):
        x = (x - self.mean) / self.std
        feats = []
        for i, layer in enumerate(self.body):
            x = layer(x)
            if i in self.layers:
                feats.append(x)
        return feats


def perceptual_loss(sr, gt, extractor):
    """Mean squared feature distance, averaged over the extractor's layers."""
    _same_shape(sr, gt)
    a = extractor(sr.reshape(-1, *sr.shape[-3:]))
    b = extractor(gt.reshape(-1, *gt.shape[-3:]))
    return sum(F.mse_loss(fa, fb) for fa, fb in zip(a, b)) / len(a)


def adv_g_from_logits(logits):
    """``-E[log sigmoid(logits)]``."""
    return F.softplus(-logits).mean()


def adv_d_from_logits(real_logits, fake_logits):
    """``-E[log sigmoid(real)] - E[log(1 - sigmoid(fake))]``."""
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def _flatten_frames(x, text_emb):
    frames = x.reshape(-1, *x.shape[-3:])
    if text_emb is None:
        return frames, None
    t = torch.as_tensor(text_emb, dtype=frames.dtype)
    t = t.reshape(-1, t.shape[-1])
    if t.shape[0] != frames.shape[0]:
        raise ShapeError(f"{t.shape[0]} text vectors for {frames.shape[0]} frames")
    return frames, t


def adv_loss_g(frame, text_emb, disc):
    frames, t = _flatten_frames(frame, text_emb)
    return adv_g_from_logits(disc(frames, t))


def adv_loss_d(real, fake, text_emb, disc):
    """Discriminator loss; ``fake`` is detached so only the discriminator learns."""
    real_f, t = _flatten_frames(real, text_emb)
    fake_f, _ = _flatten_frames(fake.detach(), text_emb)
    return adv_d_from_logits(disc(real_f, t), disc(fake_f, t))


def stage1_total(rec, neg, weights: LossWeights):
    return rec + weights.alpha * neg


def stage2_total(rec, neg, per, clipiqa, adv, weights: LossWeights):
    return stage1_total(rec, neg, weights) + per + weights.beta * clipiqa + adv
