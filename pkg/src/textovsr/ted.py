"""U-shaped discriminators, optionally conditioned on content text.

``kind="ted"`` concatenates a gated, spatially broadcast text feature with the
U-Net image feature before a residual head; ``"unet"`` drops the text path;
``"clip"`` scores per-pixel cosine alignment between a frozen image encoder
and the text vector. All variants emit raw logits.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from .exceptions import ConfigurationError, ShapeError

KINDS = ("unet", "ted", "clip")


@dataclass
class TedConfig:
    base_channels: int = 16
    depth: int = 3
    d_text: int = 64
    text_width: int = 16
    output: str = "patch_map"
    kind: str = "ted"
    text_at: str = "output"
    spectral: bool = True

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigurationError("discriminator depth must be >= 2")
        if self.output not in ("patch_map", "scalar"):
            raise ConfigurationError(f"unknown output mode {self.output!r}")
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown discriminator kind {self.kind!r}")
        if self.text_at not in ("output", "bottleneck"):
            raise ConfigurationError(f"text_at must be 'output' or 'bottleneck', got {self.text_at!r}")

    def to_dict(self):
        return asdict(self)


def _conv(cin, cout, k=3, stride=1, sn=True):
    conv = nn.Conv2d(cin, cout, k, stride, k // 2, bias=not sn)
    return spectral_norm(conv) if sn else conv


class GatedTextFilter(nn.Module):
    """Sigmoid-gated linear unit: ``(W_a t + b_a) * sigmoid(W_g t + b_g)``."""

    def __init__(self, d_text, width):
        super().__init__()
        self.d_text, self.width = d_text, width
        self.linear = nn.Linear(d_text, 2 * width)
        nn.init.zeros_(self.linear.bias)

    def forward(self, t):
        if t.shape[-1] != self.d_text:
            raise ShapeError(f"text vector has dim {t.shape[-1]}, expected {self.d_text}")
        a, g = self.linear(t).chunk(2, dim=-1)
        return a * torch.sigmoid(g)


class _ResHead(nn.Module):
    def __init__(self, cin, ch, sn):
        super().__init__()
        self.inp = _conv(cin, ch, 3, sn=sn)
        self.c1 = _conv(ch, ch, 3, sn=sn)
        self.c2 = _conv(ch, ch, 3, sn=sn)
        self.out = nn.Conv2d(ch, 1, 3, 1, 1)

    def forward(self, x):
        x = F.leaky_relu(self.inp(x), 0.2)
        x = x + self.c2(F.leaky_relu(self.c1(x), 0.2))
        return self.out(F.leaky_relu(x, 0.2))


class UNetFeatures(nn.Module):
    """Encoder-decoder with additive skips; returns decoder features at full resolution.

    ``inject`` optionally widens the bottleneck input by that many channels.
    """

    def __init__(self, base, depth, sn=True, inject=0):
        super().__init__()
        self.depth = depth
        chans = [base * 2**i for i in range(depth + 1)]
        self.inp = nn.Conv2d(3, base, 3, 1, 1)
        self.down = nn.ModuleList(_conv(chans[i], chans[i + 1], 3, 2, sn) for i in range(depth))
        self.bottleneck = _conv(chans[depth] + inject, chans[depth], 3, 1, sn)
        self.up = nn.ModuleList(_conv(chans[i + 1], chans[i], 3, 1, sn) for i in reversed(range(depth)))

    def forward(self, x, bottleneck_extra=None):
        x = F.leaky_relu(self.inp(x), 0.2)
        skips = [x]
        for conv in self.down:
            x = F.leaky_relu(conv(x), 0.2)
            skips.append(x)
        if bottleneck_extra is not None:
            extra = bottleneck_extra[:, :, None, None].expand(-1, -1, *x.shape[-2:])
            x = torch.cat([x, extra], 1)
        x = F.leaky_relu(self.bottleneck(x), 0.2)
        for conv, skip in zip(self.up, reversed(skips[:-1])):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = F.leaky_relu(conv(x), 0.2) + skip
        return x


class FrozenImageEncoder(nn.Module):
    """Fixed-seed random conv encoder standing in for a pretrained image tower."""

    def __init__(self, width=32, seed=1234):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.c1 = nn.Conv2d(3, width, 3, 1, 1)
        self.c2 = nn.Conv2d(width, width, 3, 1, 1)
        with torch.no_grad():
            for conv in (self.c1, self.c2):
                fan = conv.weight[0].numel()
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) / fan**0.5)
                conv.bias.zero_()
        self.requires_grad_(False)
        self.width = width

    def train(self, mode=True):
        return super().train(False)

    def forward(self, x):
        return self.c2(torch.tanh(self.c1(x)))


class Discriminator(nn.Module):
    def __init__(self, cfg: TedConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or TedConfig()
        base, sn = cfg.base_channels, cfg.spectral
        if cfg.kind == "clip":
            self.image_encoder = FrozenImageEncoder()
            self.proj = nn.Conv2d(self.image_encoder.width, cfg.d_text, 1)
            self.logit_scale = nn.Parameter(torch.tensor(5.0))
            self.logit_bias = nn.Parameter(torch.tensor(0.0))
            return
        inject = cfg.text_width if (cfg.kind == "ted" and cfg.text_at == "bottleneck") else 0
        self.unet = UNetFeatures(base, cfg.depth, sn, inject)
        head_in = base
        if cfg.kind == "ted":
            self.text_gate = GatedTextFilter(cfg.d_text, cfg.text_width)
            if cfg.text_at == "output":
                head_in += cfg.text_width
        self.head = _ResHead(head_in, base, sn)

    @property
    def uses_text(self):
        return self.cfg.kind in ("ted", "clip")

    def text_filter(self, text_emb):
        if self.cfg.kind != "ted":
            raise ConfigurationError(f"{self.cfg.kind!r} discriminator has no text filter")
        return self.text_gate(text_emb)

    def _check(self, frame, text_emb):
        squeeze = frame.dim() == 3
        frame = frame[None] if squeeze else frame
        h, w = frame.shape[-2:]
        m = 2**self.cfg.depth
        if h % m or w % m:
            raise ShapeError(f"frame size {h}x{w} not divisible by 2^depth={m}")
        if self.uses_text:
            if text_emb is None:
                text_emb = frame.new_zeros(frame.shape[0], self.cfg.d_text)
            text_emb = torch.as_tensor(text_emb, dtype=frame.dtype)
            if text_emb.dim() == 1:
                text_emb = text_emb[None].expand(frame.shape[0], -1)
            if text_emb.shape[-1] != self.cfg.d_text:
                raise ShapeError(f"text vector has dim {text_emb.shape[-1]}, expected {self.cfg.d_text}")
        return frame, text_emb, squeeze

    def forward(self, frame, text_emb=None):
        """Realness logits: ``(b, 1, H, W)`` patch map, or ``(b,)`` for scalar output."""
        frame, text_emb, squeeze = self._check(frame, text_emb)
        if self.cfg.kind == "clip":
            img = F.normalize(self.proj(self.image_encoder(frame)), dim=1)
            txt = F.normalize(text_emb, dim=-1)
            logits = self.logit_scale * (img * txt[:, :, None, None]).sum(1, keepdim=True) + self.logit_bias
        elif self.cfg.kind == "ted":
            filt = self.text_gate(text_emb)
            if self.cfg.text_at == "bottleneck":
                logits = self.head(self.unet(frame, filt))
            else:
                feat = self.unet(frame)
                tmap = filt[:, :, None, None].expand(-1, -1, *feat.shape[-2:])
                logits = self.head(torch.cat([feat, tmap], 1))
        else:
            logits = self.head(self.unet(frame))
        if self.cfg.output == "scalar":
            logits = logits.mean(dim=(1, 2, 3))
        return logits[0] if squeeze else logits


def discriminate(frame, text_emb, disc: Discriminator):
    return disc(frame, text_emb)
