"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""
import numpy as np
import torch

from .exceptions import NumericError, ShapeError


def check_clip_array(X, allow_batch=False, name="X"):
    """Validate a clip array and return it as contiguous float32.

    Accepts ``(n, c, h, w)`` or, with ``allow_batch``, ``(b, n, c, h, w)``.
    Values must be finite and lie in ``[0, 1]``.
    """
    arr = np.asarray(X)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    ndims = (4, 5) if allow_batch else (4,)
    if arr.ndim not in ndims:
        raise ShapeError(f"{name} must have rank {' or '.join(map(str, ndims))}, got shape {arr.shape}")
    if arr.size == 0 or arr.shape[-4] < 1:
        raise ShapeError(f"{name} must contain at least one frame")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_frame(frame, name="frame"):
    """Validate a single ``(c, h, w)`` frame."""
    arr = np.asarray(frame, dtype=np.float32)
    if arr.ndim != 3:
        raise ShapeError(f"{name} must be (c, h, w), got {arr.shape}")
    return arr


def check_finite_tensor(x, name="input"):
    if not torch.isfinite(x).all():
        raise NumericError(f"{name} contains non-finite values")
    return x


def check_embeddings(emb, d_text, name="embedding"):
    """Return ``emb`` as a float tensor whose last dimension is ``d_text``."""
    t = torch.as_tensor(emb, dtype=torch.float32) if not torch.is_tensor(emb) else emb
    if t.shape[-1] != d_text:
        raise ShapeError(f"{name} has last dimension {t.shape[-1]}, expected {d_text}")
    return t
