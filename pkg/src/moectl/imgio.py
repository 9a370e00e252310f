"""8-bit RGB image file I/O with linear mapping to/from [-1, 1]."""

from __future__ import annotations

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(3,H,W) in [-1,1] -> (H,W,3) uint8."""
    arr = np.clip(img, -1.0, 1.0)
    return np.round((arr + 1.0) * 127.5).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    """(H,W,3) uint8 -> (3,H,W) float64 in [-1,1]."""
    return arr.astype(np.float64).transpose(2, 0, 1) / 127.5 - 1.0


def save_image(path, img: np.ndarray):
    Image.fromarray(to_uint8(img), mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def save_grayscale(path, values: np.ndarray):
    """(H,W) nonnegative map scaled by its max to 8-bit grayscale."""
    peak = values.max()
    norm = values / peak if peak > 0 else values
    Image.fromarray(np.round(norm * 255).astype(np.uint8), mode="L").save(path)
