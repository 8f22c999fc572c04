"""Deterministic mock inpainting backend.

The output is a pure function of the request fields: the fill noise is keyed
by a blake2b-64 hash over every field, so identical requests produce
byte-identical images.  An empty mask low-passes the whole image and adds a
sinusoidal fingerprint (standing in for full regeneration); a nonempty mask
replaces only the masked region with smoothed seeded noise plus the
fingerprint, leaving every outside pixel bit-identical to the input.
"""

from __future__ import annotations

import hashlib
import io

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .config import ServiceConfig

_SEP = b"\x1f"
_MASK64 = 0xFFFFFFFFFFFFFFFF

MOCK_MODEL_ID = "mock-fingerprint-v1"


def _hash64(*parts: bytes | str | int) -> int:
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, int):
            data = (part & _MASK64).to_bytes(8, "little")
        elif isinstance(part, str):
            data = part.encode("utf-8")
        else:
            data = part
        h.update(data)
        h.update(_SEP)
    return int.from_bytes(h.digest(), "little")


def _decode_rgb(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"))


def _decode_mask(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return (np.asarray(im.convert("L")) > 0).astype(np.uint8)


def _encode_png(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG")
    return buf.getvalue()


def fingerprint(height: int, width: int, config: ServiceConfig) -> np.ndarray:
    fx, fy = config.fingerprint_freq
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    phase = 2.0 * np.pi * (fx * xs[None, :] + fy * ys[:, None])
    return config.fingerprint_amp * np.sin(phase)


def mock_inpaint(
    image_png: bytes,
    mask_png: bytes,
    prompt: str,
    seed: int,
    steps: int,
    guidance: float,
    config: ServiceConfig,
) -> bytes:
    image = _decode_rgb(image_png)
    mask = _decode_mask(mask_png)
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match image {image.shape[:2]}")

    height, width = mask.shape
    pattern = fingerprint(height, width, config)

    if mask.sum() == 0:
        sigma = config.pass_blur_sigma
        smooth = gaussian_filter(image.astype(np.float64), sigma=(sigma, sigma, 0.0))
        out = np.clip(np.rint(smooth + pattern[:, :, None]), 0, 255).astype(np.uint8)
        return _encode_png(out)

    key = _hash64(image_png, mask_png, prompt, seed, steps, repr(float(guidance)))
    gen = np.random.Generator(np.random.Philox(key=key))
    noise = gaussian_filter(gen.normal(size=(height, width)), config.fill_noise_smooth)
    spread = noise.std()
    if spread > 0:
        noise *= config.fill_noise_sigma / spread
    fill = np.clip(np.rint(config.fill_base + noise + pattern), 0, 255).astype(np.uint8)
    out = image.copy()
    out[mask > 0] = fill[mask > 0, None]
    return _encode_png(out)
