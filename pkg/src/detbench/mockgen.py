"""Deterministic stand-in for the diffusion inpainting service.

Implements the same request -> image mapping as the HTTP sidecar's mock mode,
so the full pipeline can run in-process.  The output is a pure function of
the request bytes: the fill noise is keyed by a hash of every request field.

Fingerprint: an additive sinusoid at FINGERPRINT_FREQ cycles/pixel with
amplitude FINGERPRINT_AMP (8-bit units).  Empty-mask requests get the whole
image low-passed (sigma PASS_BLUR_SIGMA) plus the fingerprint; nonempty masks
get the masked region replaced by smoothed seeded noise plus the fingerprint
while every pixel outside the mask stays bit-identical to the input.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from . import imgio
from .rng import hash64

FINGERPRINT_FREQ = (0.1, 0.1)  # cycles/pixel, (x, y)
FINGERPRINT_AMP = 3.0
PASS_BLUR_SIGMA = 0.5
FILL_BASE = 128.0
FILL_NOISE_SIGMA = 20.0
FILL_NOISE_SMOOTH = 2.0
MODEL_ID = "mock-fingerprint-v1"


def fingerprint(height: int, width: int) -> np.ndarray:
    fx, fy = FINGERPRINT_FREQ
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    phase = 2.0 * np.pi * (fx * xs[None, :] + fy * ys[:, None])
    return FINGERPRINT_AMP * np.sin(phase)


def _request_key(image_png: bytes, mask_png: bytes, prompt: str, seed: int, steps: int, guidance: float) -> int:
    return hash64(image_png, mask_png, prompt, seed, steps, repr(float(guidance)))


def mock_inpaint(
    image_png: bytes,
    mask_png: bytes,
    prompt: str,
    seed: int,
    steps: int,
    guidance: float,
) -> bytes:
    image = imgio.decode_rgb(image_png)
    mask = imgio.decode_mask(mask_png)
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match image {image.shape[:2]}")

    height, width = mask.shape
    print_2d = fingerprint(height, width)

    if mask.sum() == 0:
        smooth = gaussian_filter(image.astype(np.float64), sigma=(PASS_BLUR_SIGMA, PASS_BLUR_SIGMA, 0.0))
        out = np.clip(np.rint(smooth + print_2d[:, :, None]), 0, 255).astype(np.uint8)
        return imgio.encode_png(out)

    gen = np.random.Generator(
        np.random.Philox(key=_request_key(image_png, mask_png, prompt, seed, steps, guidance))
    )
    noise = gaussian_filter(gen.normal(size=(height, width)), FILL_NOISE_SMOOTH)
    spread = noise.std()
    if spread > 0:
        noise *= FILL_NOISE_SIGMA / spread
    fill = np.clip(np.rint(FILL_BASE + noise + print_2d), 0, 255).astype(np.uint8)
    out = image.copy()
    out[mask > 0] = fill[mask > 0, None]
    return imgio.encode_png(out)
