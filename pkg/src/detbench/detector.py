"""Pluggable detector scoring plus a desk-scale trainable probe.

Scoring follows the fixed-crop contract: images are never resized (resizing
washes out the low-level traces detectors rely on); a small image is
reflect-padded to the crop size, a large one is tiled with an even grid whose
first crop starts at 0 and last ends at the image edge, and the final score
is the arithmetic mean of the per-crop logits.

The toy probe is a logistic regressor over radial spectral features.  It
stands in for a fine-tuned backbone so the training protocol (balanced
batches, periodic validation, early stopping on balanced accuracy) can be
exercised end-to-end on a desktop.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.ndimage import gaussian_filter

from . import imgio, rng
from .augment import AugPolicy, apply_policy, cutmix, mixup
from .manifest import DatasetManifest, ImageRecord, balanced_batches

DEFAULT_CROP = 504
DEFAULT_BANDS = 32


@dataclass
class DetectorHandle:
    kind: str  # external_onnx | external_http | toy_probe
    location: str
    crop_size: int = DEFAULT_CROP
    normalization: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (0.485, 0.456, 0.406),
        (0.229, 0.224, 0.225),
    )

    def __post_init__(self) -> None:
        if self.kind not in ("external_onnx", "external_http", "toy_probe"):
            raise ValueError(f"unknown detector kind {self.kind!r}")
        if self.crop_size < 32:
            raise ValueError("crop_size must be >= 32")


# ---------------------------------------------------------------------------
# Crop tiling
# ---------------------------------------------------------------------------


def _axis_offsets(dim: int, crop: int) -> list[int]:
    if dim <= crop:
        return [0]
    n = math.ceil(dim / crop)
    span = dim - crop
    return [round(i * span / (n - 1)) for i in range(n)]


def tile_crops(width: int, height: int, crop_size: int) -> list[tuple[int, int, int, int]]:
    """Crop rectangles covering the image, all exactly crop_size on a side.

    Dimensions not above crop_size yield a single crop at offset 0 (padding
    happens at extraction); larger dimensions get ceil(dim/crop) evenly
    spaced offsets with the first at 0 and the last at dim - crop.
    """
    if width < 1 or height < 1:
        raise ValueError("degenerate image size")
    return [
        (x, y, crop_size, crop_size)
        for y in _axis_offsets(height, crop_size)
        for x in _axis_offsets(width, crop_size)
    ]


def _reflect_into(indices: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(indices)
    period = 2 * n - 2
    wrapped = np.mod(indices, period)
    return np.where(wrapped >= n, period - wrapped, wrapped)


def extract_crop(image: np.ndarray, rect: tuple[int, int, int, int]) -> np.ndarray:
    """Extract a crop, reflecting at the borders when the image is smaller
    than the crop."""
    x, y, w, h = rect
    rows = _reflect_into(y + np.arange(h), image.shape[0])
    cols = _reflect_into(x + np.arange(w), image.shape[1])
    return image[np.ix_(rows, cols)]


@dataclass
class ScoreResult:
    logit: float
    prob: float
    crop_logits: list[float]


def score_image(backend: Callable[[np.ndarray], float], image: np.ndarray, crop_size: int = DEFAULT_CROP) -> ScoreResult:
    """Mean of the per-crop logits over the tiling; prob = sigmoid(mean)."""
    crop_logits = []
    for index, rect in enumerate(tile_crops(image.shape[1], image.shape[0], crop_size)):
        try:
            crop_logits.append(float(backend(extract_crop(image, rect))))
        except Exception as exc:
            raise RuntimeError(f"detector backend failed on crop {index}") from exc
    logit = float(np.mean(crop_logits))
    return ScoreResult(logit=logit, prob=float(_sigmoid(logit)), crop_logits=crop_logits)


def _sigmoid(x: float | np.ndarray):
    z = np.clip(np.asarray(x, dtype=np.float64), -500.0, 500.0)
    return 1.0 / (1.0 + np.exp(-z))


# ---------------------------------------------------------------------------
# Spectral features
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureSpec:
    bands: int = DEFAULT_BANDS
    crop_size: int = DEFAULT_CROP

    @property
    def dimension(self) -> int:
        return self.bands + 1  # radial bands + high-pass residual variance


def spectral_features(image: np.ndarray, spec: FeatureSpec) -> np.ndarray:
    """Radially averaged log FFT magnitude plus a high-pass residual term.

    Band 0 contains the DC bin and is scaled on its own, so adding a constant
    to every pixel moves only that coordinate; the remaining coordinates are
    jointly unit-normalized.
    """
    gray = imgio.to_gray601(image)
    size = spec.crop_size
    if gray.shape != (size, size):
        raise ValueError(f"expected a {size}x{size} crop, got {gray.shape}")

    magnitude = np.abs(np.fft.fftshift(np.fft.fft2(gray)))
    center = size // 2
    ys, xs = np.indices((size, size))
    radius = np.hypot(ys - center, xs - center)
    nyquist = size / 2.0
    band = np.minimum((radius / nyquist * spec.bands).astype(np.int64), spec.bands - 1)
    inside = radius <= nyquist

    means = np.zeros(spec.bands)
    for k in range(spec.bands):
        sel = inside & (band == k)
        if sel.any():
            means[k] = magnitude[sel].mean()

    residual = gray - gaussian_filter(gray, 1.0)
    tail = np.log1p(np.concatenate([means[1:], [residual.var()]]))
    norm = np.linalg.norm(tail)
    if norm > 0:
        tail = tail / norm
    dc_term = np.log1p(means[0]) / np.log1p(255.0 * size * size)
    return np.concatenate([[dc_term], tail])


# ---------------------------------------------------------------------------
# Early stopping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EarlyStopState:
    best_bacc: float = -1.0
    evals_since_improve: int = 0
    min_delta: float = 0.001
    patience: int = 5
    eval_interval: int = 3435


def early_stop_step(state: EarlyStopState, new_val_bacc: float) -> tuple[EarlyStopState, bool]:
    """One evaluation: an improvement needs new >= best + min_delta; after
    `patience` consecutive non-improvements, training stops."""
    if not 0.0 <= new_val_bacc <= 1.0:
        raise ValueError("balanced accuracy must lie in [0,1]")
    if new_val_bacc >= state.best_bacc + state.min_delta:
        return replace(state, best_bacc=new_val_bacc, evals_since_improve=0), True
    bumped = replace(state, evals_since_improve=state.evals_since_improve + 1)
    return bumped, bumped.evals_since_improve < bumped.patience


# ---------------------------------------------------------------------------
# Toy probe
# ---------------------------------------------------------------------------


@dataclass
class ToyProbe:
    weights: np.ndarray
    bias: float
    feature_spec: FeatureSpec
    training_log: list[dict] = field(default_factory=list)

    def logit(self, features: np.ndarray) -> float:
        return float(features @ self.weights + self.bias)

    def score_crop(self, crop: np.ndarray) -> float:
        return self.logit(spectral_features(crop, self.feature_spec))

    def save(self, path: str | Path) -> None:
        payload = {
            "feature_spec": asdict(self.feature_spec),
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "training_log": self.training_log,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "ToyProbe":
        with open(path) as fh:
            payload = json.load(fh)
        return cls(
            weights=np.asarray(payload["weights"], dtype=np.float64),
            bias=float(payload["bias"]),
            feature_spec=FeatureSpec(**payload["feature_spec"]),
            training_log=payload["training_log"],
        )


@dataclass
class TrainSchedule:
    learning_rate: float = 0.05
    weight_decay: float = 1e-6
    batch_size: int = 24
    eval_interval: int = 3435
    min_delta: float = 0.001
    patience: int = 5
    max_iterations: int = 50_000
    seed: int = 0


def _center_crop_features(record: ImageRecord, policy: AugPolicy, spec: FeatureSpec) -> np.ndarray:
    image = imgio.load_rgb(record.path)
    image = apply_policy(image, policy, record.id)
    h, w = image.shape[:2]
    x = max(0, (w - spec.crop_size) // 2)
    y = max(0, (h - spec.crop_size) // 2)
    crop = extract_crop(image, (x, y, spec.crop_size, spec.crop_size))
    return spectral_features(crop, spec)


def _val_balanced_accuracy(probe_w: np.ndarray, probe_b: float, feats: np.ndarray, labels: np.ndarray) -> float:
    pred = (feats @ probe_w + probe_b) >= 0.0
    acc_fake = float(np.mean(pred[labels == 1]))
    acc_real = float(np.mean(~pred[labels == 0]))
    return 0.5 * (acc_fake + acc_real)


def train_probe(
    train: DatasetManifest,
    val: DatasetManifest,
    policy: AugPolicy,
    schedule: TrainSchedule,
    feature_spec: FeatureSpec | None = None,
) -> ToyProbe:
    """Adam minimization of the binary cross-entropy over spectral features,
    on class-balanced batches, with validation balanced accuracy checked
    every `eval_interval` iterations and the patience rule deciding when to
    stop."""
    if not train.records or not val.records:
        raise ValueError("train and validation manifests must be nonempty")
    spec = feature_spec or FeatureSpec()

    def features_of(records: list[ImageRecord]) -> dict[str, np.ndarray]:
        return {r.id: _center_crop_features(r, policy, spec) for r in records}

    allowed = policy.fake_variants()
    train_records = [r for r in train.records if r.label == "real" or r.variant in allowed]
    train_feats = features_of(train_records)
    val_feats = features_of(val.records)
    val_matrix = np.stack([val_feats[r.id] for r in val.records])
    val_labels = np.array([1 if r.label == "fake" else 0 for r in val.records])
    if val_labels.min() == val_labels.max():
        raise ValueError("validation manifest must contain both classes")

    mix_images: dict[str, np.ndarray] | None = None
    if policy.name == "cutmix_mixup":
        mix_images = {}
        for r in train_records:
            image = apply_policy(imgio.load_rgb(r.path), policy, r.id)
            h, w = image.shape[:2]
            rect = (max(0, (w - spec.crop_size) // 2), max(0, (h - spec.crop_size) // 2), spec.crop_size, spec.crop_size)
            mix_images[r.id] = extract_crop(image, rect)

    # optimize in per-coordinate standardized space (the raw bands are
    # strongly correlated and stall first-order methods); the affine map is
    # folded back into the returned weights, so the model stays linear in the
    # raw features
    train_matrix = np.stack([train_feats[r.id] for r in train_records])
    feat_mean = train_matrix.mean(axis=0)
    feat_scale = train_matrix.std(axis=0) + 1e-8

    def standardize(feats: np.ndarray) -> np.ndarray:
        return (feats - feat_mean) / feat_scale

    val_matrix = standardize(val_matrix)

    dim = spec.dimension
    w = np.zeros(dim)
    b = 0.0
    m = np.zeros(dim + 1)
    v = np.zeros(dim + 1)
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    stop_state = EarlyStopState(
        min_delta=schedule.min_delta, patience=schedule.patience, eval_interval=schedule.eval_interval
    )
    log_entries: list[dict] = []
    iteration = 0
    keep_going = True
    epoch = 0
    train_view = DatasetManifest(
        records=train_records, annotations=train.annotations, taxonomy=train.taxonomy, provenance=train.provenance
    )

    while keep_going and iteration < schedule.max_iterations:
        epoch_seed = rng.derive_seed(schedule.seed, "epoch", epoch)
        epoch += 1
        got_batch = False
        for batch in balanced_batches(train_view, schedule.batch_size, epoch_seed, variants=allowed):
            got_batch = True
            if mix_images is not None:
                feats, targets = _mixed_batch(batch, mix_images, spec, policy, epoch_seed, iteration)
                feats = standardize(feats)
            else:
                feats = standardize(np.stack([train_feats[r.id] for r in batch]))
                targets = np.array([1.0 if r.label == "fake" else 0.0 for r in batch])
            probs = _sigmoid(feats @ w + b)
            error = probs - targets
            grad_w = feats.T @ error / len(batch) + schedule.weight_decay * w
            grad_b = float(error.mean())
            grad = np.concatenate([grad_w, [grad_b]])
            iteration += 1
            m = beta1 * m + (1 - beta1) * grad
            v = beta2 * v + (1 - beta2) * grad * grad
            m_hat = m / (1 - beta1**iteration)
            v_hat = v / (1 - beta2**iteration)
            step = schedule.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
            w = w - step[:-1]
            b = b - float(step[-1])

            if iteration % schedule.eval_interval == 0:
                val_bacc = _val_balanced_accuracy(w, b, val_matrix, val_labels)
                stop_state, keep_going = early_stop_step(stop_state, val_bacc)
                log_entries.append(
                    {"iteration": iteration, "val_bacc": val_bacc, "best_bacc": stop_state.best_bacc}
                )
            if not keep_going or iteration >= schedule.max_iterations:
                break
        if not got_batch:
            raise ValueError("training manifest produced no batches")

    folded_w = w / feat_scale
    folded_b = b - float((w * feat_mean / feat_scale).sum())
    return ToyProbe(weights=folded_w, bias=folded_b, feature_spec=spec, training_log=log_entries)


def _mixed_batch(
    batch: list[ImageRecord],
    crops: dict[str, np.ndarray],
    spec: FeatureSpec,
    policy: AugPolicy,
    epoch_seed: int,
    iteration: int,
) -> tuple[np.ndarray, np.ndarray]:
    """cutmix/mixup tier: mix the i-th real with the i-th fake of the batch
    (soft targets), at the configured rate."""
    half = len(batch) // 2
    feats = []
    targets = []
    for i, record in enumerate(batch):
        gen = rng.stream(epoch_seed, "mix", iteration, i)
        image = crops[record.id]
        target = 1.0 if record.label == "fake" else 0.0
        if gen.random() < policy.p_mix:
            partner = batch[i + half] if i < half else batch[i - half]
            other = crops[partner.id]
            other_target = 1.0 - target
            lam = float(gen.uniform(0.0, 1.0))
            if gen.random() < 0.5:
                mixed, weight = cutmix(image, other, lam, int(gen.integers(2**63)))
            else:
                mixed, weight = mixup(image, other, lam), lam
            image = mixed
            target = weight * target + (1.0 - weight) * other_target
        feats.append(spectral_features(image, spec))
        targets.append(target)
    return np.stack(feats), np.array(targets)


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


def make_backend(handle: DetectorHandle) -> Callable[[np.ndarray], float]:
    if handle.kind == "toy_probe":
        probe = ToyProbe.load(handle.location)
        return probe.score_crop
    if handle.kind == "external_http":
        import requests

        session = requests.Session()
        url = handle.location.rstrip("/") + "/score"

        def http_backend(crop: np.ndarray) -> float:
            payload = {"image_png_b64": base64.b64encode(imgio.encode_png(crop)).decode("ascii")}
            resp = session.post(url, json=payload, timeout=300.0)
            resp.raise_for_status()
            return float(resp.json()["logit"])

        return http_backend
    # external_onnx
    try:
        import onnxruntime
    except ImportError as exc:  # pragma: no cover
        raise RuntimeError("external_onnx backend requires the onnxruntime package") from exc
    session = onnxruntime.InferenceSession(handle.location, providers=["CPUExecutionProvider"])
    input_name = session.get_inputs()[0].name
    mean = np.asarray(handle.normalization[0], dtype=np.float32).reshape(3, 1, 1)
    std = np.asarray(handle.normalization[1], dtype=np.float32).reshape(3, 1, 1)

    def onnx_backend(crop: np.ndarray) -> float:
        chw = crop.astype(np.float32).transpose(2, 0, 1) / 255.0
        batch = ((chw - mean) / std)[None]
        return float(session.run(None, {input_name: batch})[0].reshape(-1)[0])

    return onnx_backend


def score_record(backend, record: ImageRecord, crop_size: int) -> ScoreResult:
    return score_image(backend, imgio.load_rgb(record.path), crop_size)
