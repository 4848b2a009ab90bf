"""Regenerate the shipped naturalness parameters from bundled scikit-image photographs.

Usage: python3 tools/fit_naturalness.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np
from skimage import data, img_as_float

from textovsr.evaltool import fit_naturalness_params, save_naturalness_params

FIT_IMAGES = ("astronaut", "coffee", "rocket", "brick", "grass", "chelsea")


def load(name):
    img = img_as_float(getattr(data, name)())
    if img.ndim == 2:
        img = np.repeat(img[None], 3, 0)
    else:
        img = img[..., :3].transpose(2, 0, 1)
    return img


def main(out_dir):
    frames = [load(n) for n in FIT_IMAGES]
    params = fit_naturalness_params(frames)
    save_naturalness_params(params, out_dir)
    print(f"fit on {params['count']} patches -> {out_dir}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).resolve().parents[1] / "src/textovsr/data")
