"""Degradation-robust image/text feature fusion.

The image feature is filtered by multi-head self-attention over its spatial
grid, the text vector by a linear layer, and the two are combined with
multi-head cross-attention (queries from the image, keys/values from the
text). Both attention blocks are residual.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ConfigurationError, ShapeError
from .validation import check_finite_tensor


@dataclass
class DrfConfig:
    channels: int = 32
    d_text: int = 64
    heads: int = 2
    tokens_per_text: int = 1
    use_text: bool = True
    norm: bool = True

    def __post_init__(self):
        if self.channels % self.heads:
            raise ConfigurationError(f"channels={self.channels} not divisible by heads={self.heads}")
        if self.d_text <= 0 or self.tokens_per_text <= 0:
            raise ConfigurationError("d_text and tokens_per_text must be positive")


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with ``1/sqrt(d_head)`` scaling.

    Args:
        dim (int): Query / output width.
        kv_dim (int): Width of the key/value source tokens.
        heads (int): Number of heads; must divide ``dim``.
    """

    def __init__(self, dim, kv_dim, heads):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"dim={dim} not divisible by heads={heads}")
        self.dim, self.heads = dim, heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.proj = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.dim // self.heads).transpose(1, 2)

    def forward(self, x, context=None, return_weights=False):
        context = x if context is None else context
        q, k, v = self._split(self.q(x)), self._split(self.k(context)), self._split(self.v(context))
        if q.shape[-1] != k.shape[-1]:
            raise ShapeError("query and key head dimensions differ")
        if return_weights:
            attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)
            out = attn @ v
        else:
            attn = None
            out = F.scaled_dot_product_attention(q, k, v)
        b, h, n, d = out.shape
        out = self.proj(out.transpose(1, 2).reshape(b, n, h * d))
        return (out, attn) if return_weights else out


class DRF(nn.Module):
    """Fusion block; with ``use_text=False`` only the image filter is built."""

    def __init__(self, cfg: DrfConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.img_norm = nn.LayerNorm(c) if cfg.norm else nn.Identity()
        self.self_attn = MultiHeadAttention(c, c, cfg.heads)
        if cfg.use_text:
            self.text_filter = nn.Linear(cfg.d_text, cfg.tokens_per_text * c)
            nn.init.zeros_(self.text_filter.bias)
            self.query_norm = nn.LayerNorm(c) if cfg.norm else nn.Identity()
            self.cross_attn = MultiHeadAttention(c, c, cfg.heads)

    @staticmethod
    def _tokens(f):
        b, c, h, w = f.shape
        return f.flatten(2).transpose(1, 2)

    @staticmethod
    def _grid(t, h, w):
        b, n, c = t.shape
        return t.transpose(1, 2).reshape(b, c, h, w)

    def _as_batch(self, f):
        if f.dim() == 3:
            return f.unsqueeze(0), True
        if f.dim() != 4:
            raise ShapeError(f"feature must be (c, h, w) or (b, c, h, w), got {tuple(f.shape)}")
        return f, False

    def filter_image(self, f, return_weights=False):
        """Residual self-attention over the ``h*w`` spatial tokens."""
        check_finite_tensor(f, "image feature")
        f, squeeze = self._as_batch(f)
        if f.shape[1] != self.cfg.channels:
            raise ShapeError(f"feature has {f.shape[1]} channels, expected {self.cfg.channels}")
        h, w = f.shape[-2:]
        tok = self._tokens(f)
        res = self.self_attn(self.img_norm(tok), return_weights=return_weights)
        res, attn = res if return_weights else (res, None)
        out = self._grid(tok + res, h, w)
        out = out[0] if squeeze else out
        return (out, attn) if return_weights else out

    def filter_text(self, t):
        """Affine map of ``(b, d_text)`` text vectors to ``(b, tokens, channels)``."""
        if not self.cfg.use_text:
            raise ConfigurationError("this DRF instance was built without a text path")
        check_finite_tensor(t, "text feature")
        squeeze = t.dim() == 1
        t = t.unsqueeze(0) if squeeze else t
        if t.shape[-1] != self.cfg.d_text:
            raise ShapeError(f"text vector has dim {t.shape[-1]}, expected {self.cfg.d_text}")
        out = self.text_filter(t).view(t.shape[0], self.cfg.tokens_per_text, self.cfg.channels)
        return out[0] if squeeze else out

    def cross_fuse(self, f_img, text_tokens, return_weights=False):
        """Cross-attention from image queries to text keys/values, plus residual."""
        f_img, squeeze = self._as_batch(f_img)
        if text_tokens.dim() == 2:
            text_tokens = text_tokens.unsqueeze(0)
        if text_tokens.shape[-1] != self.cfg.channels:
            raise ShapeError("text token width does not match the image head dimension")
        h, w = f_img.shape[-2:]
        tok = self._tokens(f_img)
        res = self.cross_attn(self.query_norm(tok), text_tokens, return_weights=return_weights)
        res, attn = res if return_weights else (res, None)
        out = self._grid(tok + res, h, w)
        out = out[0] if squeeze else out
        return (out, attn) if return_weights else out

    def forward(self, f, t=None):
        out = self.filter_image(f)
        if not self.cfg.use_text:
            return out
        if t is None:
            t = f.new_zeros((f.shape[0], self.cfg.d_text) if f.dim() == 4 else (self.cfg.d_text,))
        return self.cross_fuse(out, self.filter_text(t))
