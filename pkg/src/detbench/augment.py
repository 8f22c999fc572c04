"""Augmentation and perturbation suites.

Covers the standard blur+JPEG training augmentation, cutmix/mixup, the extra
post-processing ops of the most aggressive content-augmentation tier
(scaling, cut-out, noise, jitter), declarative perturbations for robustness
sweeps, and the social-network upload simulation (downscale then recompress).

Every operation is a pure function of (input image, parameters, seed); all
random draws come from per-op streams keyed by (seed, op name) so adding an
op never shifts another op's draws.  Identity parameters (sigma=0, scale=1,
lambda=1) return the input bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Iterator

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from . import rng
from .imgio import jpeg_roundtrip

MIN_DIMENSION = 16
MID_GRAY = 128
CROP_LIMIT = 504

PERTURBATION_KINDS = ("jpeg", "resize", "blur", "noise", "cutout", "jitter", "scale_crop")


@dataclass(frozen=True)
class PerturbationSpec:
    """One declarative post-processing op; only the fields for `kind` are read."""

    kind: str
    jpeg_qf: int | None = None
    resize_scale: float | None = None
    blur_sigma: float | None = None
    noise_sigma: float | None = None
    cutout_frac: float | None = None
    jitter: dict | None = None  # {"brightness": [r,g,b], "contrast": [r,g,b]}

    def __post_init__(self) -> None:
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.kind == "jpeg" and not (self.jpeg_qf and 1 <= self.jpeg_qf <= 100):
            raise ValueError("jpeg perturbation needs jpeg_qf in 1..100")
        if self.kind in ("resize", "scale_crop") and not (self.resize_scale and self.resize_scale > 0):
            raise ValueError(f"{self.kind} perturbation needs resize_scale > 0")
        if self.kind == "blur" and (self.blur_sigma is None or self.blur_sigma < 0):
            raise ValueError("blur perturbation needs blur_sigma >= 0")
        if self.kind == "noise" and (self.noise_sigma is None or self.noise_sigma < 0):
            raise ValueError("noise perturbation needs noise_sigma >= 0")
        if self.kind == "cutout" and not (self.cutout_frac is not None and 0 <= self.cutout_frac <= 1):
            raise ValueError("cutout perturbation needs cutout_frac in [0,1]")
        if self.kind == "jitter" and self.jitter is None:
            raise ValueError("jitter perturbation needs jitter deltas")

    def param(self) -> float:
        """The one number that characterizes this op (for sweep tables)."""
        return {
            "jpeg": self.jpeg_qf,
            "resize": self.resize_scale,
            "scale_crop": self.resize_scale,
            "blur": self.blur_sigma,
            "noise": self.noise_sigma,
            "cutout": self.cutout_frac,
            "jitter": 0.0,
        }[self.kind]

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, obj: dict) -> "PerturbationSpec":
        return cls(**obj)


def _as_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def _resize_bicubic(image: np.ndarray, scale: float) -> np.ndarray:
    h, w = image.shape[:2]
    new_w, new_h = int(round(scale * w)), int(round(scale * h))
    if (new_w, new_h) == (w, h):
        return image
    if new_w < MIN_DIMENSION or new_h < MIN_DIMENSION:
        raise ValueError(f"degenerate size {new_w}x{new_h}")
    return np.asarray(Image.fromarray(image).resize((new_w, new_h), Image.BICUBIC))


def _gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return image
    smooth = gaussian_filter(image.astype(np.float64), sigma=(sigma, sigma, 0.0), truncate=4.0)
    return _as_uint8(smooth)


def _add_noise(image: np.ndarray, sigma: float, gen: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return image
    return _as_uint8(image.astype(np.float64) + gen.normal(0.0, sigma, image.shape))


def _cutout(image: np.ndarray, frac: float, gen: np.random.Generator) -> np.ndarray:
    if frac == 0:
        return image
    h, w = image.shape[:2]
    rect_w = max(1, int(round(w * np.sqrt(frac))))
    rect_h = max(1, int(round(h * np.sqrt(frac))))
    x = int(gen.integers(0, w - rect_w + 1))
    y = int(gen.integers(0, h - rect_h + 1))
    out = image.copy()
    out[y : y + rect_h, x : x + rect_w] = MID_GRAY
    return out


def _jitter(image: np.ndarray, deltas: dict) -> np.ndarray:
    brightness = np.asarray(deltas.get("brightness", [0, 0, 0]), dtype=np.float64)
    contrast = np.asarray(deltas.get("contrast", [0, 0, 0]), dtype=np.float64)
    arr = image.astype(np.float64)
    arr = (arr - MID_GRAY) * (1.0 + contrast)[None, None, :] + MID_GRAY + 255.0 * brightness[None, None, :]
    return _as_uint8(arr)


def _scale_crop(image: np.ndarray, scale: float, gen: np.random.Generator) -> np.ndarray:
    resized = _resize_bicubic(image, scale)
    h, w = resized.shape[:2]
    crop_w, crop_h = min(w, CROP_LIMIT), min(h, CROP_LIMIT)
    x = int(gen.integers(0, w - crop_w + 1))
    y = int(gen.integers(0, h - crop_h + 1))
    return resized[y : y + crop_h, x : x + crop_w]


def apply_perturbation(image: np.ndarray, spec: PerturbationSpec, seed: int) -> np.ndarray:
    gen = rng.stream(seed, "perturb", spec.kind)
    if spec.kind == "jpeg":
        return jpeg_roundtrip(image, spec.jpeg_qf)
    if spec.kind == "resize":
        return _resize_bicubic(image, spec.resize_scale)
    if spec.kind == "blur":
        return _gaussian_blur(image, spec.blur_sigma)
    if spec.kind == "noise":
        return _add_noise(image, spec.noise_sigma, gen)
    if spec.kind == "cutout":
        return _cutout(image, spec.cutout_frac, gen)
    if spec.kind == "jitter":
        return _jitter(image, spec.jitter)
    return _scale_crop(image, spec.resize_scale, gen)


# ---------------------------------------------------------------------------
# Training-time augmentation
# ---------------------------------------------------------------------------


def standard_aug(
    image: np.ndarray,
    seed: int,
    p_blur: float = 0.5,
    p_jpeg: float = 0.5,
    blur_range: tuple[float, float] = (0.0, 3.0),
    qf_range: tuple[int, int] = (30, 100),
) -> np.ndarray:
    """Blur-then-JPEG training augmentation: with probability p_blur a
    Gaussian blur with sigma ~ U[blur_range], with probability p_jpeg a JPEG
    pass at qf ~ U{qf_range}."""
    blur_gen = rng.stream(seed, "standard_aug", "blur")
    if blur_gen.random() < p_blur:
        image = _gaussian_blur(image, float(blur_gen.uniform(*blur_range)))
    jpeg_gen = rng.stream(seed, "standard_aug", "jpeg")
    if jpeg_gen.random() < p_jpeg:
        image = jpeg_roundtrip(image, int(jpeg_gen.integers(qf_range[0], qf_range[1] + 1)))
    return image


def cutmix(image_a: np.ndarray, image_b: np.ndarray, lam: float, seed: int) -> tuple[np.ndarray, float]:
    """Paste a rectangle of area fraction (1-lam) from B into A at a
    seeded position; returns the image and A's remaining label weight."""
    if image_a.shape != image_b.shape:
        raise ValueError("cutmix images must share dimensions")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must be in [0,1]")
    h, w = image_a.shape[:2]
    side = np.sqrt(1.0 - lam)
    rect_w, rect_h = int(round(w * side)), int(round(h * side))
    if rect_w == 0 or rect_h == 0:
        return image_a.copy(), 1.0
    gen = rng.stream(seed, "cutmix")
    x = int(gen.integers(0, w - rect_w + 1))
    y = int(gen.integers(0, h - rect_h + 1))
    out = image_a.copy()
    out[y : y + rect_h, x : x + rect_w] = image_b[y : y + rect_h, x : x + rect_w]
    return out, 1.0 - (rect_w * rect_h) / (w * h)


def mixup(image_a: np.ndarray, image_b: np.ndarray, lam: float) -> np.ndarray:
    """Pixelwise lam*A + (1-lam)*B, rounded to the nearest channel value."""
    if image_a.shape != image_b.shape:
        raise ValueError("mixup images must share dimensions")
    blend = lam * image_a.astype(np.float64) + (1.0 - lam) * image_b.astype(np.float64)
    return _as_uint8(blend)


@dataclass(frozen=True)
class PlusPlusParams:
    """Extra ops of the most aggressive tier; probabilities and ranges are
    config defaults, not reported values."""

    p_scale: float = 0.1
    p_cutout: float = 0.1
    p_noise: float = 0.1
    p_jitter: float = 0.1
    scale_range: tuple[float, float] = (0.5, 2.0)
    cutout_range: tuple[float, float] = (0.02, 0.25)
    noise_range: tuple[float, float] = (0.0, 5.0)
    jitter_delta: float = 0.1


def inpaintedpp_post(image: np.ndarray, seed: int, params: PlusPlusParams = PlusPlusParams()) -> np.ndarray:
    """Scaling, cut-out, noise addition, and jitter, each applied
    independently with its configured probability, in that fixed order."""
    gen_scale = rng.stream(seed, "pp", "scale")
    if gen_scale.random() < params.p_scale:
        image = _scale_crop(image, float(gen_scale.uniform(*params.scale_range)), gen_scale)
    gen_cut = rng.stream(seed, "pp", "cutout")
    if gen_cut.random() < params.p_cutout:
        image = _cutout(image, float(gen_cut.uniform(*params.cutout_range)), gen_cut)
    gen_noise = rng.stream(seed, "pp", "noise")
    if gen_noise.random() < params.p_noise:
        image = _add_noise(image, float(gen_noise.uniform(*params.noise_range)), gen_noise)
    gen_jit = rng.stream(seed, "pp", "jitter")
    if gen_jit.random() < params.p_jitter:
        d = params.jitter_delta
        deltas = {
            "brightness": gen_jit.uniform(-d, d, 3).tolist(),
            "contrast": gen_jit.uniform(-d, d, 3).tolist(),
        }
        image = _jitter(image, deltas)
    return image


def social_sim_params(seed: int) -> tuple[float, int]:
    """The (scale, jpeg_qf) draw of the upload simulation: scale from
    [0.7, 1.0], quality factor from {70..100}."""
    gen = rng.stream(seed, "social_sim")
    return float(gen.uniform(0.7, 1.0)), int(gen.integers(70, 101))


def social_network_sim(image: np.ndarray, seed: int) -> tuple[np.ndarray, dict]:
    """Upload-pipeline simulation: downscale then recompress, parameters
    drawn by social_sim_params and returned alongside the image."""
    scale, qf = social_sim_params(seed)
    out = _resize_bicubic(image, scale)
    out = jpeg_roundtrip(out, qf)
    return out, {"scale": scale, "jpeg_qf": qf}


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

POLICY_NAMES = ("standard", "cutmix_mixup", "inpainted", "inpainted_plus", "inpainted_plus_plus")

# which fake variants each content-augmentation tier trains on
_TIER_VARIANTS = {
    "standard": ("self_cond",),
    "cutmix_mixup": ("self_cond",),
    "inpainted": ("self_cond", "self_cond_bg", "inpaint_same", "inpaint_same_bg"),
    "inpainted_plus": (
        "self_cond",
        "self_cond_bg",
        "inpaint_same",
        "inpaint_same_bg",
        "inpaint_diff",
        "inpaint_diff_bg",
    ),
}
_TIER_VARIANTS["inpainted_plus_plus"] = _TIER_VARIANTS["inpainted_plus"]


@dataclass
class AugPolicy:
    name: str = "standard"
    p_blur: float = 0.5
    p_jpeg: float = 0.5
    blur_range: tuple[float, float] = (0.0, 3.0)
    qf_range: tuple[int, int] = (30, 100)
    p_mix: float = 0.5  # cutmix/mixup application rate (cutmix_mixup tier)
    plus_plus: PlusPlusParams = field(default_factory=PlusPlusParams)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.name not in POLICY_NAMES:
            raise ValueError(f"unknown policy {self.name!r}")
        for p in (self.p_blur, self.p_jpeg, self.p_mix):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0,1]")

    def fake_variants(self) -> tuple[str, ...]:
        return _TIER_VARIANTS[self.name]

    def to_dict(self) -> dict:
        obj = asdict(self)
        obj["blur_range"] = list(self.blur_range)
        obj["qf_range"] = list(self.qf_range)
        return obj

    @classmethod
    def from_dict(cls, obj: dict) -> "AugPolicy":
        obj = dict(obj)
        if "plus_plus" in obj and isinstance(obj["plus_plus"], dict):
            pp = dict(obj["plus_plus"])
            for key in ("scale_range", "cutout_range", "noise_range"):
                if key in pp:
                    pp[key] = tuple(pp[key])
            obj["plus_plus"] = PlusPlusParams(**pp)
        for key in ("blur_range", "qf_range"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)


def apply_policy(image: np.ndarray, policy: AugPolicy, record_id: str) -> np.ndarray:
    """Per-image augmentation for training: the shared blur+JPEG pass, plus
    the extra ++ ops when the tier asks for them.  Seeded per record."""
    seed = rng.derive_seed(policy.seed, record_id, "aug")
    image = standard_aug(image, seed, policy.p_blur, policy.p_jpeg, policy.blur_range, policy.qf_range)
    if policy.name == "inpainted_plus_plus":
        image = inpaintedpp_post(image, seed, policy.plus_plus)
    return image


def sweep_grid(specs: list[dict]) -> Iterator[PerturbationSpec]:
    for obj in specs:
        yield PerturbationSpec.from_dict(obj)
