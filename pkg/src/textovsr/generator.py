"""Dual-branch recurrent generator with flow-guided bidirectional propagation.

Both branches share the BasicVSR-style trunk by default (``share_trunk``):
per-frame shallow features, a backward then a forward recurrent pass, a
merge and a x4 pixel-shuffle head with a bicubic skip. They differ in where
text is fused: the positive branch fuses per-frame content text before
propagation, the negative branch fuses the clip's degradation text after
the merge (or before propagation, for the placement ablation).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .drf import DRF, DrfConfig
from .exceptions import ConfigurationError, ContractError, ShapeError
from .flow import estimate_flow, make_flow_backend, warp

POSITIONS = ("before_deep", "after_deep")


@dataclass
class GeneratorConfig:
    channels: int = 32
    num_blocks: int = 2
    shallow_blocks: int = 1
    scale: int = 4
    drf_positive: Optional[str] = "before_deep"
    drf_negative: Optional[str] = "after_deep"
    text_positive: bool = True
    text_negative: bool = True
    d_text: int = 64
    heads: int = 2
    tokens_per_text: int = 1
    drf_norm: bool = True
    flow_backend: str = "zero"
    flow_root: Optional[str] = None
    share_trunk: bool = True

    def __post_init__(self):
        if self.scale != 4:
            raise ConfigurationError(f"only x4 upscaling is supported, got scale={self.scale}")
        if self.drf_positive not in (None, "before_deep"):
            raise ConfigurationError(f"positive DRF position must be 'before_deep' or None, got {self.drf_positive!r}")
        if self.drf_negative not in (None, *POSITIONS):
            raise ConfigurationError(f"negative DRF position must be one of {POSITIONS} or None")
        if self.flow_backend not in ("zero", "pyramid_lk", "external"):
            raise ConfigurationError(f"unknown flow backend {self.flow_backend!r}")

    def drf_config(self, use_text):
        return DrfConfig(self.channels, self.d_text, self.heads, self.tokens_per_text, use_text, self.drf_norm)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class BranchOutput:
    sr: torch.Tensor
    hidden_trace: Optional[dict] = field(default=None)


class ResidualBlockNoBN(nn.Module):
    """Conv-ReLU-Conv with identity skip; convs start scaled by 0.1."""

    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, 1, 1)
        self.conv2 = nn.Conv2d(ch, ch, 3, 1, 1)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                conv.weight.mul_(0.1)
                conv.bias.zero_()

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class ResidualBlocksWithInputConv(nn.Sequential):
    def __init__(self, in_ch, out_ch, num_blocks):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, 1, 1),
            nn.LeakyReLU(0.1, inplace=True),
            *[ResidualBlockNoBN(out_ch) for _ in range(num_blocks)],
        )


class Trunk(nn.Module):
    """Shallow extractor, two propagation cells, merge and reconstruction head."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        c = cfg.channels
        self.shallow = ResidualBlocksWithInputConv(3, c, cfg.shallow_blocks)
        self.backward_prop = ResidualBlocksWithInputConv(2 * c, c, cfg.num_blocks)
        self.forward_prop = ResidualBlocksWithInputConv(2 * c, c, cfg.num_blocks)
        self.merge = nn.Sequential(nn.Conv2d(2 * c, c, 1), nn.LeakyReLU(0.1, inplace=True), ResidualBlockNoBN(c))
        self.up1 = nn.Conv2d(c, 4 * c, 3, 1, 1)
        self.up2 = nn.Conv2d(c, 4 * c, 3, 1, 1)
        self.conv_hr = nn.Conv2d(c, c, 3, 1, 1)
        self.conv_last = nn.Conv2d(c, 3, 3, 1, 1)

    def head(self, feat, lr_frame):
        x = F.leaky_relu(F.pixel_shuffle(self.up1(feat), 2), 0.1)
        x = F.leaky_relu(F.pixel_shuffle(self.up2(x), 2), 0.1)
        x = self.conv_last(F.leaky_relu(self.conv_hr(x), 0.1))
        base = F.interpolate(lr_frame, scale_factor=4, mode="bicubic", align_corners=False)
        return x + base


def shallow_features(frame: torch.Tensor, trunk: Trunk) -> torch.Tensor:
    """``(c, h, w)`` or ``(b, c, h, w)`` frame -> ``(channels, h, w)`` feature."""
    squeeze = frame.dim() == 3
    out = trunk.shallow(frame[None] if squeeze else frame)
    return out[0] if squeeze else out


def propagate_step(prev_feat, flow, fused, cell) -> torch.Tensor:
    """``cell(cat(warp(prev_feat, flow), fused))``; one step of the recurrence."""
    if prev_feat.shape[-2:] != fused.shape[-2:]:
        raise ShapeError("hidden state and fused feature differ spatially")
    expected = cell[0].in_channels
    if prev_feat.shape[-3] + fused.shape[-3] != expected:
        raise ShapeError(f"concatenated width {prev_feat.shape[-3] + fused.shape[-3]} != {expected}")
    return cell(torch.cat([warp(prev_feat, flow), fused], dim=-3))


class TextOVSRGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or GeneratorConfig()
        self.trunk = Trunk(cfg)
        if not cfg.share_trunk:
            self.trunk_neg = Trunk(cfg)
        if cfg.drf_positive:
            self.drf_pos = DRF(cfg.drf_config(cfg.text_positive))
        if cfg.drf_negative:
            self.drf_neg = DRF(cfg.drf_config(cfg.text_negative))
        self.flow = make_flow_backend(cfg.flow_backend, cfg.flow_root)
        self.max_stored_states = 0

    @property
    def negative_trunk(self):
        return self.trunk if self.cfg.share_trunk else self.trunk_neg

    def negative_exclusive_modules(self):
        mods = {}
        if hasattr(self, "drf_neg"):
            mods["drf_neg"] = self.drf_neg
        if not self.cfg.share_trunk:
            mods["trunk_neg"] = self.trunk_neg
        return mods

    # ------------------------------------------------------------------ helpers
    def _flows(self, lr, clip_ids, direction, offset=0):
        b, n = lr.shape[:2]
        flows = {}
        for t in range(n):
            s = t + 1 if direction == "backward" else t - 1
            if 0 <= s < n:
                key = None
                if clip_ids is not None:
                    key = [f"{cid}/{t + offset:04d}_{s + offset:04d}" for cid in clip_ids]
                flows[t] = estimate_flow(lr[:, t], lr[:, s], self.flow, key=key)
        return flows

    @staticmethod
    def _check_lr(lr):
        if lr.dim() == 4:
            lr = lr.unsqueeze(0)
        if lr.dim() != 5 or lr.shape[2] != 3:
            raise ShapeError(f"expected (b, n, 3, h, w) frames, got {tuple(lr.shape)}")
        return lr

    def _run(self, lr, emb, trunk, drf, position, clip_ids=None, trace=False, offset=0):
        """Shared recurrence. ``emb`` is ``(b, n, d)`` or None."""
        b, n, _, h, w = lr.shape
        c = self.cfg.channels
        feats = [trunk.shallow(lr[:, t]) for t in range(n)]
        if drf is not None and position == "before_deep":
            feats = [drf(f, None if emb is None else emb[:, t]) for f, t in zip(feats, range(n))]
        back_flows = self._flows(lr, clip_ids, "backward", offset)
        fwd_flows = self._flows(lr, clip_ids, "forward", offset)

        hb = [None] * n
        state = lr.new_zeros(b, c, h, w)
        for t in reversed(range(n)):
            flow = back_flows.get(t, lr.new_zeros(b, 2, h, w))
            state = propagate_step(state, flow, feats[t], trunk.backward_prop)
            hb[t] = state
        self.max_stored_states = max(self.max_stored_states, n)

        hf, outs = [None] * n, []
        state = lr.new_zeros(b, c, h, w)
        for t in range(n):
            flow = fwd_flows.get(t, lr.new_zeros(b, 2, h, w))
            state = propagate_step(state, flow, feats[t], trunk.forward_prop)
            hf[t] = state
            merged = trunk.merge(torch.cat([hb[t], state], 1))
            if drf is not None and position == "after_deep":
                merged = drf(merged, None if emb is None else emb[:, t])
            outs.append(trunk.head(merged, lr[:, t]).clamp(0.0, 1.0))
        sr = torch.stack(outs, 1)
        hidden = {"shallow": feats, "backward": hb, "forward": hf} if trace else None
        return BranchOutput(sr, hidden)

    # ---------------------------------------------------------------- branches
    def forward_positive(self, v_lr, content_embeddings=None, clip_ids=None, trace=False, frame_offset=0):
        """Positive branch on degraded frames with per-frame content embeddings.

        Args:
            v_lr: ``(b, n, 3, h, w)`` or ``(n, 3, h, w)`` frames in [0, 1].
            content_embeddings: ``(b, n, d_text)`` / ``(n, d_text)``; required
                when the positive DRF uses text.
        """
        squeeze = v_lr.dim() == 4
        lr = self._check_lr(v_lr)
        drf = getattr(self, "drf_pos", None)
        emb = None
        if drf is not None and self.cfg.text_positive:
            if content_embeddings is None:
                raise ContractError("positive branch needs a content embedding for every frame")
            emb = torch.as_tensor(content_embeddings, dtype=lr.dtype).detach()
            if emb.dim() == 2:
                emb = emb.unsqueeze(0)
            if emb.shape[:2] != lr.shape[:2] or emb.shape[-1] != self.cfg.d_text:
                raise ContractError(f"content embeddings {tuple(emb.shape)} do not cover frames {tuple(lr.shape[:2])}")
        out = self._run(lr, emb, self.trunk, drf, self.cfg.drf_positive, clip_ids, trace, frame_offset)
        if squeeze:
            out.sr = out.sr[0]
        return out

    def forward_negative(self, v_tilde, degradation_embedding=None, clip_ids=None, trace=False):
        """Negative branch on noise-mixed frames with one clip-level embedding."""
        squeeze = v_tilde.dim() == 4
        lr = self._check_lr(v_tilde)
        drf = getattr(self, "drf_neg", None)
        emb = None
        if drf is not None and self.cfg.text_negative:
            if degradation_embedding is None:
                raise ContractError("negative branch needs a degradation embedding")
            e = torch.as_tensor(degradation_embedding, dtype=lr.dtype).detach()
            if e.dim() == 1:
                e = e.unsqueeze(0)
            if e.shape != (lr.shape[0], self.cfg.d_text):
                raise ContractError(f"degradation embedding {tuple(e.shape)} does not match batch")
            emb = e[:, None, :].expand(-1, lr.shape[1], -1)
        out = self._run(lr, emb, self.negative_trunk, drf, self.cfg.drf_negative, clip_ids, trace)
        if squeeze:
            out.sr = out.sr[0]
        return out

    def forward(self, v_lr, content_embeddings=None):
        return self.forward_positive(v_lr, content_embeddings).sr

    @torch.no_grad()
    def infer(self, v_lr, content_embeddings=None, chunk_size=None, clip_ids=None):
        """Positive-branch-only super-resolution in eval mode.

        With ``chunk_size`` the clip is processed in independent chunks, so
        stored propagation state is bounded by ``2 * chunk_size`` hidden maps
        of ``channels x h x w`` per batch item regardless of clip length.
        """
        was_training = self.training
        self.eval()
        try:
            lr = self._check_lr(torch.as_tensor(v_lr))
            squeeze = torch.as_tensor(v_lr).dim() == 4
            emb = None if content_embeddings is None else torch.as_tensor(content_embeddings, dtype=lr.dtype)
            if emb is not None and emb.dim() == 2:
                emb = emb.unsqueeze(0)
            n = lr.shape[1]
            step = chunk_size or n
            outs = []
            for s in range(0, n, step):
                e = None if emb is None else emb[:, s:s + step]
                outs.append(self.forward_positive(lr[:, s:s + step], e, clip_ids, frame_offset=s).sr)
            sr = torch.cat(outs, 1)
            return sr[0] if squeeze else sr
        finally:
            self.train(was_training)
