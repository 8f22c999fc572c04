"""Averaged power spectra of aligned image differences.

Generators leave traces that show up as structure in the spectrum of
(real - generated) differences; averaging over many pairs makes the pattern
visible.  The FFT uses the orthonormal convention, so the grid total divided
by S^2 equals the mean squared pixel difference (a cheap integrity check).
Grayscale is ITU-R 601 luma and no window function is applied.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .imgio import to_gray601

log = logging.getLogger(__name__)

DEFAULT_SIZE = 256
DEFAULT_BANDS = 32

PAIR_KINDS = ("real_vs_recon", "real_vs_selfcond", "recon_vs_selfcond", "custom")


@dataclass
class SpectrumMap:
    power: np.ndarray  # SxS mean power, DC centered
    count: int
    pair_kind: str
    radial: np.ndarray


def _central_crop(gray: np.ndarray, size: int) -> np.ndarray:
    h, w = gray.shape
    y = (h - size) // 2
    x = (w - size) // 2
    return gray[y : y + size, x : x + size]


def diff_power_spectrum(
    pairs: list[tuple[np.ndarray, np.ndarray]],
    size: int = DEFAULT_SIZE,
    pair_kind: str = "custom",
    bands: int = DEFAULT_BANDS,
) -> SpectrumMap:
    """Mean over pairs of |FFT(a - b)|^2 on central size x size luma crops.

    Misaligned pairs (shape mismatch or smaller than the crop) are skipped
    with a warning; an empty pair list is an error.
    """
    if pair_kind not in PAIR_KINDS:
        raise ValueError(f"unknown pair kind {pair_kind!r}")
    if not pairs:
        raise ValueError("no pairs to average")
    total = np.zeros((size, size))
    count = 0
    for index, (a, b) in enumerate(pairs):
        if a.shape != b.shape:
            log.warning("pair %d skipped: shapes %s vs %s", index, a.shape, b.shape)
            continue
        if a.shape[0] < size or a.shape[1] < size:
            log.warning("pair %d skipped: smaller than crop %d", index, size)
            continue
        diff = _central_crop(to_gray601(a), size) - _central_crop(to_gray601(b), size)
        total += np.abs(np.fft.fftshift(np.fft.fft2(diff, norm="ortho"))) ** 2
        count += 1
    if count == 0:
        raise ValueError("all pairs were skipped")
    power = total / count
    return SpectrumMap(power=power, count=count, pair_kind=pair_kind, radial=radial_profile_of(power, bands))


def radial_profile_of(power: np.ndarray, bands: int) -> np.ndarray:
    """Mean power in equal-width annuli from DC to Nyquist (corners beyond
    Nyquist are excluded)."""
    size = power.shape[0]
    center = size // 2
    ys, xs = np.indices(power.shape)
    radius = np.hypot(ys - center, xs - center)
    nyquist = size / 2.0
    band = np.minimum((radius / nyquist * bands).astype(np.int64), bands - 1)
    inside = radius <= nyquist
    profile = np.zeros(bands)
    for k in range(bands):
        sel = inside & (band == k)
        if sel.any():
            profile[k] = power[sel].mean()
    return profile


def radial_profile(spectrum: SpectrumMap, bands: int = DEFAULT_BANDS) -> np.ndarray:
    return radial_profile_of(spectrum.power, bands)


def emit_spectrum(spectrum: SpectrumMap, out_dir: str | Path) -> None:
    """Write spectrum.csv (full grid), radial.csv, and a log-scaled PNG."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "spectrum.csv", spectrum.power, delimiter=",", fmt="%.17g")
    with open(out / "radial.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["band", "mean_power"])
        for k, value in enumerate(spectrum.radial):
            writer.writerow([k, f"{value:.17g}"])
    scaled = np.log1p(spectrum.power)
    peak = scaled.max()
    if peak > 0:
        scaled = scaled / peak
    Image.fromarray((scaled * 255).astype(np.uint8), mode="L").save(out / "spectrum.png")


def load_spectrum_csv(path: str | Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",")
