"""Frozen optical-flow backends and flow-guided feature warping.

Flow fields are ``(2, h, w)`` (or batched ``(b, 2, h, w)``) pixel
displacements, channel 0 horizontal. ``estimate_flow(a, b)`` returns ``u``
with ``a(x) ~ b(x + u(x))``, so ``warp(b, estimate_flow(a, b))`` aligns
``b`` onto ``a``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import ShapeError


def warp(feature: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinear backward warp with border replication: ``out(x) = feature(x + flow(x))``."""
    squeeze = feature.dim() == 3
    if squeeze:
        feature, flow = feature.unsqueeze(0), flow.unsqueeze(0)
    if feature.shape[-2:] != flow.shape[-2:] or flow.shape[1] != 2:
        raise ShapeError(f"flow {tuple(flow.shape)} does not match feature {tuple(feature.shape)}")
    b, _, h, w = feature.shape
    gy, gx = torch.meshgrid(
        torch.arange(h, dtype=flow.dtype, device=flow.device),
        torch.arange(w, dtype=flow.dtype, device=flow.device),
        indexing="ij",
    )
    x = gx + flow[:, 0]
    y = gy + flow[:, 1]
    grid = torch.stack((2.0 * x / max(w - 1, 1) - 1.0, 2.0 * y / max(h - 1, 1) - 1.0), dim=-1)
    out = F.grid_sample(feature, grid.to(feature.dtype), mode="bilinear", padding_mode="border", align_corners=True)
    return out[0] if squeeze else out


def _gray(x):
    if x.shape[-3] >= 3:
        return 0.299 * x[..., 0:1, :, :] + 0.587 * x[..., 1:2, :, :] + 0.114 * x[..., 2:3, :, :]
    return x[..., :1, :, :]


class ZeroFlow:
    name = "zero"

    def __call__(self, frame_a, frame_b, key=None):
        shape = (*frame_a.shape[:-3], 2, *frame_a.shape[-2:])
        return torch.zeros(shape, dtype=frame_a.dtype, device=frame_a.device)


class PyramidLKFlow:
    """Dense coarse-to-fine Lucas-Kanade on box-filtered structure tensors.

    Args:
        levels: Pyramid depth (halving each level, stops near 8 px).
        iterations: Gauss-Newton refinements per level.
        window: Box window size for the local least-squares.
        reg: Tikhonov term that keeps flat regions at zero motion.
    """

    name = "pyramid_lk"

    def __init__(self, levels=3, iterations=4, window=7, reg=1e-4):
        self.levels, self.iterations, self.window, self.reg = levels, iterations, window, reg
        blur = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
        self._blur = (blur[:, None] * blur[None, :]).view(1, 1, 5, 5)

    def _smooth(self, x):
        return F.conv2d(F.pad(x, (2, 2, 2, 2), mode="replicate"), self._blur.to(x.dtype))

    def _box(self, x):
        r = self.window // 2
        return F.avg_pool2d(F.pad(x, (r, r, r, r), mode="replicate"), self.window, stride=1)

    @staticmethod
    def _grad(x):
        p = F.pad(x, (1, 1, 1, 1), mode="replicate")
        gx = 0.5 * (p[..., 1:-1, 2:] - p[..., 1:-1, :-2])
        gy = 0.5 * (p[..., 2:, 1:-1] - p[..., :-2, 1:-1])
        return gx, gy

    @torch.no_grad()
    def __call__(self, frame_a, frame_b, key=None):
        squeeze = frame_a.dim() == 3
        a = _gray(frame_a if not squeeze else frame_a[None]).double()
        b = _gray(frame_b if not squeeze else frame_b[None]).double()
        pa, pb = [self._smooth(a)], [self._smooth(b)]
        for _ in range(self.levels - 1):
            if min(pa[-1].shape[-2:]) < 16:
                break
            pa.append(F.avg_pool2d(pa[-1], 2))
            pb.append(F.avg_pool2d(pb[-1], 2))
        flow = torch.zeros((a.shape[0], 2, *pa[-1].shape[-2:]), dtype=a.dtype)
        for la, lb in zip(reversed(pa), reversed(pb)):
            if flow.shape[-2:] != la.shape[-2:]:
                flow = 2.0 * F.interpolate(flow, size=la.shape[-2:], mode="bilinear", align_corners=False)
            for _ in range(self.iterations):
                bw = warp(lb, flow)
                gx, gy = self._grad(bw)
                it = bw - la
                sxx, syy, sxy = self._box(gx * gx), self._box(gy * gy), self._box(gx * gy)
                sxt, syt = self._box(gx * it), self._box(gy * it)
                sxx, syy = sxx + self.reg, syy + self.reg
                det = sxx * syy - sxy * sxy
                du = -(syy * sxt - sxy * syt) / det
                dv = -(sxx * syt - sxy * sxt) / det
                flow = flow + torch.cat([du, dv], 1)
        flow = flow.to(frame_a.dtype)
        return flow[0] if squeeze else flow


class ExternalFlow:
    """Loads precomputed ``.npy`` flow fields from ``root/<key>.npy``."""

    name = "external"

    def __init__(self, root):
        self.root = Path(root)

    def path_for(self, key):
        return self.root / f"{key}.npy"

    @torch.no_grad()
    def __call__(self, frame_a, frame_b, key=None):
        if key is None:
            raise ValueError("external flow requires a key naming the frame pair")
        keys = [key] if isinstance(key, str) else list(key)
        fields = []
        for k in keys:
            path = self.path_for(k)
            if not path.exists():
                raise FileNotFoundError(f"missing precomputed flow file: {path}")
            fields.append(torch.from_numpy(np.load(path)).to(frame_a.dtype))
        out = torch.stack(fields) if not isinstance(key, str) else fields[0]
        if out.shape[-2:] != frame_a.shape[-2:]:
            raise ShapeError(f"flow file shape {tuple(out.shape)} does not match frames")
        return out


def make_flow_backend(name="zero", root=None):
    if name == "zero":
        return ZeroFlow()
    if name == "pyramid_lk":
        return PyramidLKFlow()
    if name == "external":
        if root is None:
            raise ValueError("external flow backend requires a directory")
        return ExternalFlow(root)
    raise ValueError(f"unknown flow backend {name!r}")


def estimate_flow(frame_a, frame_b, backend, key=None) -> torch.Tensor:
    """Flow from ``frame_a`` to ``frame_b``; the backend never receives gradients."""
    if frame_a.shape != frame_b.shape:
        raise ShapeError("frames must share shape")
    with torch.no_grad():
        return backend(frame_a.detach(), frame_b.detach(), key=key).detach()
