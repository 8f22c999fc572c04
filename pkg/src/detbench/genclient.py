"""Inpainting request construction, sidecar transport, and job execution.

Requests carry the reference image, a binary mask (all-zero for
self-conditioned regeneration), and a text prompt.  The wire protocol is
HTTP POST /inpaint with base64 PNG payloads; an in-process mock transport
implements the identical contract for tests and CI.

Jobs are planned without pixel data (see manifest.plan_fake_variants) and
materialized here at execution time.  Output files are content-addressed by
the request hash, so interrupted runs resume without regenerating anything.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import requests

from . import imgio, mockgen, rng
from .manifest import (
    DatasetManifest,
    ImageRecord,
    ObjectAnnotation,
    decode_rle,
    select_editable_object,
)

log = logging.getLogger(__name__)

DEFAULT_STEPS = 50
DEFAULT_GUIDANCE = 7.5


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class InpaintRequest:
    image_png: bytes
    mask_png: bytes
    prompt: str
    seed: int
    steps: int = DEFAULT_STEPS
    guidance: float = DEFAULT_GUIDANCE

    def __post_init__(self) -> None:
        image = imgio.decode_rgb(self.image_png)
        mask = imgio.decode_mask(self.mask_png)
        if mask.shape != image.shape[:2]:
            raise ValueError("mask dimensions must equal image dimensions")
        if self.prompt == "" and mask.any():
            raise ValueError("prompt may be empty only for an empty mask")
        if self.steps < 1 or self.guidance < 0:
            raise ValueError("steps must be >= 1 and guidance >= 0")

    def to_wire(self) -> dict:
        return {
            "image_png_b64": base64.b64encode(self.image_png).decode("ascii"),
            "mask_png_b64": base64.b64encode(self.mask_png).decode("ascii"),
            "prompt": self.prompt,
            "seed": self.seed,
            "steps": self.steps,
            "guidance": self.guidance,
        }

    def digest(self) -> str:
        h = hashlib.sha256()
        for part in (self.image_png, self.mask_png, self.prompt.encode(), str(self.seed).encode(), str(self.steps).encode(), repr(float(self.guidance)).encode()):
            h.update(part)
            h.update(b"\x1f")
        return h.hexdigest()


@dataclass
class GenerationJob:
    job_id: str
    record_id: str
    variant: str
    seed: int
    prompt: str
    category: str | None
    mask_kind: str  # empty | segmentation | bbox
    steps: int = DEFAULT_STEPS
    guidance: float = DEFAULT_GUIDANCE
    depends_on: str | None = None
    status: str = "pending"  # pending | done | failed
    output_path: str | None = None

    def __post_init__(self) -> None:
        if self.variant.endswith("_bg") != (self.depends_on is not None):
            raise ValueError(f"{self.job_id}: _bg variants and only _bg variants depend on a sibling")

    def to_dict(self) -> dict:
        return asdict(self)


def build_self_conditioned(
    image: np.ndarray, seed: int, steps: int = DEFAULT_STEPS, guidance: float = DEFAULT_GUIDANCE
) -> InpaintRequest:
    """Empty mask and empty prompt: the diffusion steps regenerate the input."""
    mask = np.zeros(image.shape[:2], dtype=np.uint8)
    return InpaintRequest(imgio.encode_png(image), imgio.encode_mask(mask), "", seed, steps, guidance)


def replacement_category(category: str, mode: str, taxonomy: dict[str, str], seed: int) -> str:
    """Pick the category the edited object is regenerated as.

    mode="same" keeps the category; mode="different" draws uniformly from the
    other members of its supercategory.  "person" has no usable supercategory
    and draws from all other categories; so does any category whose
    supercategory has no other member (logged).
    """
    if mode == "same":
        return category
    if mode != "different":
        raise ValueError(f"unknown mode {mode!r}")
    if category == "person":
        pool = sorted(c for c in taxonomy if c != "person")
    else:
        supercategory = taxonomy[category]
        pool = sorted(c for c, s in taxonomy.items() if s == supercategory and c != category)
        if not pool:
            log.warning("supercategory %r has a single member; falling back to all categories", supercategory)
            pool = sorted(c for c in taxonomy if c != category)
    if not pool:
        raise ValueError("taxonomy has no replacement candidates")
    return pool[rng.uniform_index(len(pool), seed, "replacement_category")]


def _bbox_mask(shape: tuple[int, int], bbox: tuple[int, int, int, int]) -> np.ndarray:
    x, y, w, h = bbox
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate bbox {bbox}")
    mask = np.zeros(shape, dtype=np.uint8)
    mask[y : y + h, x : x + w] = 1
    return mask


def build_inpaint(
    image: np.ndarray,
    annotation: ObjectAnnotation,
    mode: str,
    taxonomy: dict[str, str],
    seed: int,
    steps: int = DEFAULT_STEPS,
    guidance: float = DEFAULT_GUIDANCE,
    prompt_template: str = "a photo of a {category}",
) -> InpaintRequest:
    """Object-replacement request: segmentation mask for same-category edits,
    the filled bounding box for different-category ones (new objects need
    room to differ in shape)."""
    if mode == "same":
        mask = decode_rle(annotation.mask)
    else:
        mask = _bbox_mask(image.shape[:2], annotation.bbox)
    category = replacement_category(annotation.category, mode, taxonomy, seed)
    prompt = prompt_template.format(category=category)
    return InpaintRequest(imgio.encode_png(image), imgio.encode_mask(mask), prompt, seed, steps, guidance)


def composite_background(original: np.ndarray, generated: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Generated pixels where mask=1, original pixels where mask=0, bit-exact."""
    if original.shape != generated.shape or mask.shape != original.shape[:2]:
        raise ValueError("composite inputs must share dimensions")
    sel = (mask > 0)
    if original.ndim == 3:
        sel = sel[:, :, None]
    return np.where(sel, generated, original)


# ---------------------------------------------------------------------------
# Transports
# ---------------------------------------------------------------------------


class MockTransport:
    """In-process transport implementing the sidecar wire contract."""

    def __init__(self) -> None:
        self.calls = 0

    def health(self) -> dict:
        return {"status": "ok", "model_id": mockgen.MODEL_ID, "mock": True}

    def inpaint(self, request: InpaintRequest) -> bytes:
        self.calls += 1
        return mockgen.mock_inpaint(
            request.image_png, request.mask_png, request.prompt, request.seed, request.steps, request.guidance
        )


class HttpTransport:
    def __init__(self, endpoint: str, timeout: float = 300.0) -> None:
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.session = requests.Session()

    def health(self) -> dict:
        resp = self.session.get(f"{self.endpoint}/health", timeout=self.timeout)
        resp.raise_for_status()
        return resp.json()

    def inpaint(self, request: InpaintRequest) -> bytes:
        resp = self.session.post(f"{self.endpoint}/inpaint", json=request.to_wire(), timeout=self.timeout)
        resp.raise_for_status()
        return base64.b64decode(resp.json()["image_png_b64"])


def make_transport(endpoint: str):
    if endpoint == "mock":
        return MockTransport()
    return HttpTransport(endpoint)


# ---------------------------------------------------------------------------
# Job execution
# ---------------------------------------------------------------------------


def materialize_request(job: GenerationJob, image: np.ndarray, annotation: ObjectAnnotation | None) -> InpaintRequest:
    if job.mask_kind == "empty":
        return build_self_conditioned(image, job.seed, job.steps, job.guidance)
    if annotation is None:
        raise GenerationError(f"{job.job_id}: masked job needs an annotation")
    if job.mask_kind == "segmentation":
        mask = decode_rle(annotation.mask)
    elif job.mask_kind == "bbox":
        mask = _bbox_mask(image.shape[:2], annotation.bbox)
    else:
        raise GenerationError(f"{job.job_id}: unknown mask kind {job.mask_kind}")
    return InpaintRequest(
        imgio.encode_png(image), imgio.encode_mask(mask), job.prompt, job.seed, job.steps, job.guidance
    )


def _composite_mask(job: GenerationJob, image_shape: tuple[int, int], annotation: ObjectAnnotation) -> np.ndarray:
    if job.mask_kind == "segmentation":
        return decode_rle(annotation.mask)
    return _bbox_mask(image_shape, annotation.bbox)


def run_jobs(
    jobs: list[GenerationJob],
    endpoint: str,
    manifest: DatasetManifest,
    out_dir: str | Path,
    max_in_flight: int = 4,
    retries: int = 2,
    transport=None,
) -> list[GenerationJob]:
    """Execute jobs against the sidecar: dependencies first, _bg variants as
    local composites of their sibling's output.

    Re-running is cheap: a job whose content-addressed output already exists
    is marked done without any network traffic.  Per-job failures are retried
    then recorded without aborting the batch; an unreachable endpoint up
    front is fatal.
    """
    if not jobs:
        return []
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    transport = transport or make_transport(endpoint)
    try:
        transport.health()
    except Exception as exc:
        raise GenerationError(f"generation endpoint unreachable: {exc}") from exc

    records = manifest.by_id()
    image_cache: dict[str, np.ndarray] = {}
    cache_lock = threading.Lock()

    def load_image(record_id: str) -> np.ndarray:
        with cache_lock:
            if record_id not in image_cache:
                image_cache[record_id] = imgio.load_rgb(records[record_id].path)
            return image_cache[record_id]

    def annotation_for(job: GenerationJob) -> ObjectAnnotation | None:
        candidates = manifest.annotations_for(job.record_id)
        return select_editable_object(records[job.record_id], candidates) if candidates else None

    def run_generation(job: GenerationJob) -> None:
        image = load_image(job.record_id)
        request = materialize_request(job, image, annotation_for(job))
        path = out / f"{job.record_id}__{job.variant}__{request.digest()[:12]}.png"
        job.output_path = str(path)
        if path.exists():
            job.status = "done"
            return
        for attempt in range(retries + 1):
            try:
                data = transport.inpaint(request)
                imgio.decode_rgb(data)  # fail early on a bad payload
                path.write_bytes(data)
                job.status = "done"
                return
            except Exception as exc:
                log.warning("job %s attempt %d failed: %s", job.job_id, attempt + 1, exc)
                if attempt < retries:
                    time.sleep(min(0.2 * 2**attempt, 2.0))
        job.status = "failed"

    generation = [j for j in jobs if j.depends_on is None]
    composites = [j for j in jobs if j.depends_on is not None]
    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        list(pool.map(run_generation, generation))

    by_id = {j.job_id: j for j in jobs}
    for job in composites:
        sibling = by_id.get(job.depends_on)
        if sibling is None or sibling.status != "done":
            job.status = "failed"
            log.warning("job %s skipped: dependency %s not done", job.job_id, job.depends_on)
            continue
        annotation = annotation_for(job)
        if annotation is None:
            job.status = "failed"
            continue
        original = load_image(job.record_id)
        mask = _composite_mask(job, original.shape[:2], annotation)
        digest = hashlib.sha256(f"{Path(sibling.output_path).name}|bg|{job.mask_kind}".encode()).hexdigest()[:12]
        path = out / f"{job.record_id}__{job.variant}__{digest}.png"
        job.output_path = str(path)
        if not path.exists():
            generated = imgio.load_rgb(sibling.output_path)
            imgio.save_png(composite_background(original, generated, mask), path)
        job.status = "done"

    with open(out / "jobs.jsonl", "w") as fh:
        for job in jobs:
            fh.write(json.dumps(job.to_dict(), sort_keys=True))
            fh.write("\n")
    return jobs


def records_from_jobs(jobs: list[GenerationJob], manifest: DatasetManifest, generator_tag: str) -> list[ImageRecord]:
    """Fake ImageRecords for every completed job, aligned to their reals."""
    records = manifest.by_id()
    out = []
    for job in jobs:
        if job.status != "done":
            continue
        real = records[job.record_id]
        out.append(
            ImageRecord(
                id=f"{job.record_id}__{job.variant}",
                path=job.output_path,
                label="fake",
                pair_id=job.record_id,
                variant=job.variant,
                generator_tag=generator_tag,
                source_tag=real.source_tag,
                width=real.width,
                height=real.height,
                container="png",
                seed=job.seed,
            )
        )
    return out
