"""Thin wrappers around Pillow for the codecs the harness relies on.

Images travel through the harness as HxWx3 uint8 RGB arrays (masks as HxW
uint8, nonzero = selected).  Fakes are exchanged as PNG so no lossy step is
injected before the augmentation stages decide on one.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

# ITU-R 601 luma weights
_LUMA = (0.299, 0.587, 0.114)


def encode_png(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG")
    return buf.getvalue()


def encode_jpeg(image: np.ndarray, qf: int) -> bytes:
    if not 1 <= qf <= 100:
        raise ValueError(f"jpeg quality factor out of range: {qf}")
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="JPEG", quality=int(qf))
    return buf.getvalue()


def decode_rgb(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"))


def decode_mask(data: bytes) -> np.ndarray:
    """Decode a mask PNG to a 0/1 uint8 array (any nonzero pixel selects)."""
    with Image.open(io.BytesIO(data)) as im:
        return (np.asarray(im.convert("L")) > 0).astype(np.uint8)


def encode_mask(mask: np.ndarray) -> bytes:
    return encode_png(np.where(mask > 0, 255, 0).astype(np.uint8))


def jpeg_roundtrip(image: np.ndarray, qf: int) -> np.ndarray:
    return decode_rgb(encode_jpeg(image, qf))


def load_rgb(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def save_png(image: np.ndarray, path: str | Path) -> None:
    Image.fromarray(image).save(path, format="PNG")


def to_gray601(image: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma as float64; grayscale inputs pass through."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    return _LUMA[0] * arr[..., 0] + _LUMA[1] * arr[..., 1] + _LUMA[2] * arr[..., 2]
