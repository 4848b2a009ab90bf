"""Reading and writing clips as directories of numbered PNG frames."""
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import DatasetError


def read_image(path) -> np.ndarray:
    """Load an 8/16-bit PNG as a ``(c, h, w)`` float32 array in [0, 1]."""
    im = Image.open(path)
    if im.mode in ("I;16", "I;16B", "I"):
        arr = np.asarray(im, dtype=np.float32) / 65535.0
    else:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_image(path, frame: np.ndarray):
    """Write a ``(c, h, w)`` frame in [0, 1] as an 8-bit PNG."""
    arr = np.clip(np.rint(np.asarray(frame).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def frame_paths(directory):
    return sorted(Path(directory).glob("[0-9]*.png"))


def read_clip_dir(directory, clip_id=None, fps=Fraction(25)):
    from .degrade import VideoClip

    files = frame_paths(directory)
    if not files:
        raise DatasetError(f"no numbered PNG frames in {directory}")
    frames = np.stack([read_image(f) for f in files])
    return VideoClip(frames, clip_id or Path(directory).parent.name, fps)


def write_clip_dir(directory, clip):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(clip.frames):
        write_image(directory / f"{i:04d}.png", f)
