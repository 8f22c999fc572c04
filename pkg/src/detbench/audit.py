"""Format-bias audit and repair.

Real photo pools are usually JPEG while generated pools are usually lossless,
so a classifier can pass benchmarks by reading compression history instead of
generation traces.  The audit compares the two classes' container, JPEG
quality, and resolution distributions and raises flags; the repair
re-encodes the fake class at quality factors drawn from the real class's
empirical distribution, mirroring how an unbiased evaluation subset is built.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import imgio, rng
from .manifest import DatasetManifest, ImageRecord

# Annex-K luminance quantization table, natural order.
LUMA_BASE = np.array(
    [
        16, 11, 10, 16, 24, 40, 51, 61,
        12, 12, 14, 19, 26, 58, 60, 55,
        14, 13, 16, 24, 40, 57, 69, 56,
        14, 17, 22, 29, 51, 87, 80, 62,
        18, 22, 37, 56, 68, 109, 103, 77,
        24, 35, 55, 64, 81, 104, 113, 92,
        49, 64, 78, 87, 103, 121, 120, 101,
        72, 92, 95, 98, 112, 100, 103, 99,
    ],
    dtype=np.int64,
)

LOSSLESS = "lossless"


def scaled_luma_table(qf: int) -> np.ndarray:
    """IJG quality scaling of the base luminance table."""
    if not 1 <= qf <= 100:
        raise ValueError("quality factor must be in 1..100")
    scale = 5000 // qf if qf < 50 else 200 - 2 * qf
    table = (LUMA_BASE * scale + 50) // 100
    return np.clip(table, 1, 255)


_CANDIDATES = np.stack([scaled_luma_table(qf) for qf in range(1, 101)])


def estimate_jpeg_qf(data: bytes | str | Path) -> int | str:
    """Estimate the encoder quality factor from the luminance quantization
    table; non-JPEG containers report "lossless"."""
    if not isinstance(data, bytes):
        data = Path(data).read_bytes()
    if data[:2] != b"\xff\xd8":
        return LOSSLESS
    try:
        with Image.open(io.BytesIO(data)) as im:
            table = np.asarray(im.quantization[0], dtype=np.int64)
    except Exception as exc:
        raise ValueError(f"cannot read JPEG quantization table: {exc}") from exc
    distances = np.abs(_CANDIDATES - table[None, :]).sum(axis=1)
    return int(np.argmin(distances)) + 1


def ks_distance(sample_a: np.ndarray, sample_b: np.ndarray) -> float:
    """Two-sample Kolmogorov-Smirnov distance (max ECDF gap)."""
    if len(sample_a) == 0 or len(sample_b) == 0:
        raise ValueError("KS distance needs nonempty samples")
    values = np.union1d(sample_a, sample_b)
    cdf_a = np.searchsorted(np.sort(sample_a), values, side="right") / len(sample_a)
    cdf_b = np.searchsorted(np.sort(sample_b), values, side="right") / len(sample_b)
    return float(np.max(np.abs(cdf_a - cdf_b)))


def _histogram(values: list) -> dict:
    out: dict = {}
    for v in values:
        out[v] = out.get(v, 0) + 1
    return dict(sorted(out.items(), key=lambda kv: str(kv[0])))


_CONTAINER_ORDER = {"jpeg": 0, "png": 1, "other": 2}


@dataclass
class BiasReport:
    container_hist: dict[str, dict]
    qf_hist: dict[str, dict]
    resolution_hist: dict[str, dict]
    ks: dict[str, float | None]
    flags: dict[str, bool]
    thresholds: dict[str, float]
    notes: list[str] = field(default_factory=list)

    @property
    def biased(self) -> bool:
        return any(self.flags.values())

    def to_dict(self) -> dict:
        return {
            "container_hist": self.container_hist,
            "qf_hist": {k: {str(q): n for q, n in v.items()} for k, v in self.qf_hist.items()},
            "resolution_hist": {k: {str(r): n for r, n in v.items()} for k, v in self.resolution_hist.items()},
            "ks": self.ks,
            "flags": self.flags,
            "thresholds": self.thresholds,
            "notes": self.notes,
        }


def format_bias_report(
    manifest: DatasetManifest,
    ks_threshold: float = 0.25,
    container_mass_threshold: float = 0.25,
    spike_fraction: float = 0.5,
) -> BiasReport:
    """Compare per-class container / JPEG-QF / resolution distributions.

    Flags fire when the KS distance exceeds the threshold for QF or
    resolution, when the container distributions differ on more than the
    configured mass, or when most of one class shares a single exact
    resolution absent from the other (the telltale of one class having been
    resized)."""
    reals, fakes = manifest.reals(), manifest.fakes()
    if not reals or not fakes:
        raise ValueError("bias report requires both classes")

    notes: list[str] = []

    def containers(records: list[ImageRecord]) -> list[str]:
        return [r.container for r in records]

    def qfs(records: list[ImageRecord]) -> np.ndarray:
        return np.array([r.jpeg_qf for r in records if r.jpeg_qf is not None], dtype=np.float64)

    def resolutions(records: list[ImageRecord]) -> np.ndarray:
        return np.array([min(r.width, r.height) for r in records], dtype=np.float64)

    container_real = np.array([_CONTAINER_ORDER[c] for c in containers(reals)], dtype=np.float64)
    container_fake = np.array([_CONTAINER_ORDER[c] for c in containers(fakes)], dtype=np.float64)
    ks_container = ks_distance(container_real, container_fake)

    mass_diff = 0.0
    for name in _CONTAINER_ORDER:
        p = sum(1 for c in containers(reals) if c == name) / len(reals)
        q = sum(1 for c in containers(fakes) if c == name) / len(fakes)
        mass_diff += abs(p - q)
    mass_diff /= 2.0

    qf_real, qf_fake = qfs(reals), qfs(fakes)
    if len(qf_real) and len(qf_fake):
        ks_qf = ks_distance(qf_real, qf_fake)
    else:
        ks_qf = None
        notes.append("qf comparison skipped: a class has no jpeg records")

    ks_resolution = ks_distance(resolutions(reals), resolutions(fakes))

    spike = False
    real_res = _histogram([(r.width, r.height) for r in reals])
    fake_res = _histogram([(r.width, r.height) for r in fakes])
    for hist, other, cls in ((real_res, fake_res, "real"), (fake_res, real_res, "fake")):
        for resolution, count in hist.items():
            total = sum(hist.values())
            if count / total > spike_fraction and resolution not in other:
                spike = True
                notes.append(f"resolution spike: {count}/{total} {cls} records share {resolution}")

    flags = {
        "container": mass_diff > container_mass_threshold,
        "qf": ks_qf is not None and ks_qf > ks_threshold,
        "resolution": ks_resolution > ks_threshold,
        "resolution_spike": spike,
    }
    return BiasReport(
        container_hist={"real": _histogram(containers(reals)), "fake": _histogram(containers(fakes))},
        qf_hist={"real": _histogram(qf_real.astype(int).tolist()), "fake": _histogram(qf_fake.astype(int).tolist())},
        resolution_hist={"real": real_res, "fake": fake_res},
        ks={"container": ks_container, "qf": ks_qf, "resolution": ks_resolution, "container_mass": mass_diff},
        flags=flags,
        thresholds={
            "ks": ks_threshold,
            "container_mass": container_mass_threshold,
            "spike_fraction": spike_fraction,
        },
        notes=notes,
    )


def rebalance_compression(
    manifest: DatasetManifest, out_dir: str | Path, seed: int, target_class: str = "real"
) -> DatasetManifest:
    """Re-encode every fake at a JPEG quality drawn from the real class's
    empirical QF distribution; reals are never touched.

    The draw is stratified (a shuffled cycling copy of the real QF pool)
    rather than iid, so the rebalanced histograms match up to rounding and a
    re-audit passes even on small fixtures."""
    if target_class != "real":
        raise ValueError("only the real class can be the compression target")
    qf_pool = sorted(r.jpeg_qf for r in manifest.reals() if r.jpeg_qf is not None)
    if not qf_pool:
        raise ValueError("no target distribution: real class is entirely lossless")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gen = rng.stream(seed, "rebalance_compression")
    n_fakes = len(manifest.fakes())
    copies = -(-n_fakes // len(qf_pool))
    assignments = np.tile(qf_pool, copies)[:n_fakes]
    gen.shuffle(assignments)
    fake_index = 0
    new_records = []
    for record in manifest.records:
        if record.label == "real":
            new_records.append(record)
            continue
        qf = int(assignments[fake_index])
        fake_index += 1
        image = imgio.load_rgb(record.path)
        new_path = out / f"{record.id}_unbiased.jpg"
        new_path.write_bytes(imgio.encode_jpeg(image, qf))
        new_records.append(
            ImageRecord(
                id=record.id,
                path=str(new_path),
                label=record.label,
                pair_id=record.pair_id,
                variant=record.variant,
                generator_tag=record.generator_tag,
                source_tag=record.source_tag,
                width=record.width,
                height=record.height,
                container="jpeg",
                jpeg_qf=qf,
                seed=record.seed,
            )
        )
    rebalanced = DatasetManifest(
        records=new_records,
        annotations=manifest.annotations,
        taxonomy=manifest.taxonomy,
        provenance={**manifest.provenance, "rebalanced_seed": seed},
    )
    rebalanced.validate()
    return rebalanced
