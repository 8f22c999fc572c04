"""Dataset manifest: record model, COCO-style ingestion, fake-variant
planning, and balanced sampling.

A manifest holds real records plus the six generated variants planned for
each real: a whole-image regeneration conditioned on the real image
(`self_cond`), an object replaced with one of the same category
(`inpaint_same`), an object replaced with one from a sibling category
(`inpaint_diff`), and for each of those a `_bg` version whose background is
restored from the original pixels.

On disk a manifest is `manifest.jsonl` (one typed JSON object per line, so
long generation runs can append) plus `manifest.header.json` carrying the
taxonomy and build provenance.  Serialization is canonical (sorted keys,
fixed separators): serialize -> parse -> serialize is byte-identical.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Iterator, TYPE_CHECKING

import numpy as np
from PIL import Image, ImageDraw

from . import rng
from . import imgio

if TYPE_CHECKING:  # pragma: no cover
    from .genclient import GenerationJob

log = logging.getLogger(__name__)

REAL_VARIANT = "real"
FAKE_VARIANTS = (
    "self_cond",
    "self_cond_bg",
    "inpaint_same",
    "inpaint_same_bg",
    "inpaint_diff",
    "inpaint_diff_bg",
)
VARIANTS = (REAL_VARIANT, *FAKE_VARIANTS)
CONTAINERS = ("jpeg", "png", "other")


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Run-length masks (column-major counts, first run counts zeros)
# ---------------------------------------------------------------------------


def encode_rle(mask: np.ndarray) -> dict:
    """Encode a binary HxW mask as uncompressed column-major RLE."""
    h, w = mask.shape
    flat = (np.asarray(mask) > 0).astype(np.uint8).flatten(order="F")
    counts: list[int] = []
    run_val = 0
    run_len = 0
    for v in flat:
        if v == run_val:
            run_len += 1
        else:
            counts.append(run_len)
            run_val = v
            run_len = 1
    counts.append(run_len)
    return {"size": [int(h), int(w)], "counts": counts}


def decode_rle(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=np.uint8)
    pos = 0
    val = 0
    for run in rle["counts"]:
        if val:
            flat[pos : pos + run] = 1
        pos += run
        val ^= 1
    if pos != h * w:
        raise ManifestError(f"RLE length {pos} does not match size {h}x{w}")
    return flat.reshape((h, w), order="F")


def rle_area(rle: dict) -> int:
    return int(sum(rle["counts"][1::2]))


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass
class ImageRecord:
    id: str
    path: str
    label: str  # "real" | "fake"
    pair_id: str
    variant: str
    generator_tag: str
    source_tag: str
    width: int
    height: int
    container: str
    jpeg_qf: int | None = None
    seed: int | None = None

    def validate(self) -> None:
        if self.label not in ("real", "fake"):
            raise ManifestError(f"{self.id}: bad label {self.label}")
        if self.variant not in VARIANTS:
            raise ManifestError(f"{self.id}: unknown variant {self.variant}")
        if (self.label == "real") != (self.variant == REAL_VARIANT):
            raise ManifestError(f"{self.id}: label/variant mismatch")
        if self.width < 1 or self.height < 1:
            raise ManifestError(f"{self.id}: degenerate size")
        if self.container not in CONTAINERS:
            raise ManifestError(f"{self.id}: unknown container {self.container}")
        if (self.jpeg_qf is not None) != (self.container == "jpeg"):
            raise ManifestError(f"{self.id}: jpeg_qf present iff container is jpeg")
        if self.jpeg_qf is not None and not 1 <= self.jpeg_qf <= 100:
            raise ManifestError(f"{self.id}: jpeg_qf out of range")


@dataclass
class ObjectAnnotation:
    record_id: str
    category: str
    supercategory: str
    mask: dict  # RLE in crop coordinates
    bbox: tuple[int, int, int, int]  # tight (x, y, w, h) of the mask

    def area(self) -> int:
        return rle_area(self.mask)

    def validate(self) -> None:
        h, w = self.mask["size"]
        area = self.area()
        if not 1 <= area < w * h:
            raise ManifestError(f"{self.record_id}: mask area {area} out of range")
        x, y, bw, bh = self.bbox
        decoded = decode_rle(self.mask)
        ys, xs = np.nonzero(decoded)
        tight = (int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))
        if (x, y, bw, bh) != tight:
            raise ManifestError(f"{self.record_id}: bbox {self.bbox} not tight (expected {tight})")


def tight_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise ManifestError("empty mask has no bbox")
    return (int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))


@dataclass
class DatasetManifest:
    records: list[ImageRecord] = field(default_factory=list)
    annotations: list[ObjectAnnotation] = field(default_factory=list)
    taxonomy: dict[str, str] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.id: r for r in self.records}

    def reals(self) -> list[ImageRecord]:
        return [r for r in self.records if r.label == "real"]

    def fakes(self) -> list[ImageRecord]:
        return [r for r in self.records if r.label == "fake"]

    def annotations_for(self, record_id: str) -> list[ObjectAnnotation]:
        return [a for a in self.annotations if a.record_id == record_id]

    def validate(self) -> None:
        ids = [r.id for r in self.records]
        if len(ids) != len(set(ids)):
            raise ManifestError("duplicate record ids")
        index = self.by_id()
        for r in self.records:
            r.validate()
            if r.label == "fake":
                src = index.get(r.pair_id)
                if src is None or src.label != "real":
                    raise ManifestError(f"{r.id}: pair_id {r.pair_id} does not resolve to a real record")
            elif r.pair_id != r.id:
                raise ManifestError(f"{r.id}: real record must pair with itself")
        for a in self.annotations:
            if a.record_id not in index:
                raise ManifestError(f"annotation references unknown record {a.record_id}")

    # -- persistence --------------------------------------------------------

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        header = {"taxonomy": self.taxonomy, "provenance": self.provenance}
        with open(out / "manifest.header.json", "w") as fh:
            fh.write(_canon(header))
            fh.write("\n")
        with open(out / "manifest.jsonl", "w") as fh:
            for r in self.records:
                fh.write(_canon({"kind": "record", **asdict(r)}))
                fh.write("\n")
            for a in self.annotations:
                obj = asdict(a)
                obj["bbox"] = list(a.bbox)
                fh.write(_canon({"kind": "annotation", **obj}))
                fh.write("\n")

    @classmethod
    def load(cls, in_dir: str | Path) -> "DatasetManifest":
        src = Path(in_dir)
        with open(src / "manifest.header.json") as fh:
            header = json.load(fh)
        manifest = cls(taxonomy=header["taxonomy"], provenance=header["provenance"])
        with open(src / "manifest.jsonl") as fh:
            for line in fh:
                obj = json.loads(line)
                kind = obj.pop("kind")
                if kind == "record":
                    manifest.records.append(ImageRecord(**obj))
                elif kind == "annotation":
                    obj["bbox"] = tuple(obj["bbox"])
                    manifest.annotations.append(ObjectAnnotation(**obj))
                else:
                    raise ManifestError(f"unknown line kind {kind!r}")
        return manifest


def _canon(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# Crop rule
# ---------------------------------------------------------------------------


def largest_central_crop(width: int, height: int) -> tuple[int, int, int, int]:
    """Largest centered square: side min(w, h), offsets floored."""
    if width < 1 or height < 1:
        raise ManifestError("degenerate image size")
    side = min(width, height)
    return ((width - side) // 2, (height - side) // 2, side, side)


# ---------------------------------------------------------------------------
# COCO-style ingestion
# ---------------------------------------------------------------------------


def _segmentation_to_mask(segmentation, height: int, width: int) -> np.ndarray:
    """Rasterize a COCO segmentation (polygon list or uncompressed RLE)."""
    if isinstance(segmentation, dict):
        return decode_rle(segmentation)
    im = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(im)
    for poly in segmentation:
        points = list(zip(poly[0::2], poly[1::2]))
        if len(points) >= 3:
            draw.polygon(points, outline=1, fill=1)
    return np.asarray(im, dtype=np.uint8)


def default_license_filter(name: str) -> bool:
    lowered = name.lower()
    return "creative commons" in lowered or "cc " in lowered or lowered.startswith("cc")


def ingest_reals(
    listing: str | Path,
    annotation_file: str | Path,
    out_dir: str | Path,
    license_filter: Callable[[str], bool] = default_license_filter,
    min_objects: int = 1,
    source_tag: str = "local",
) -> DatasetManifest:
    """Build the real-image pool from a directory (or index file) plus a
    COCO-style annotation JSON.

    Each accepted image is cropped to its largest central square, re-encoded
    losslessly as PNG under ``out_dir/reals``, and its annotations are moved
    to crop coordinates.  Rejections (license, missing objects, unreadable
    files) are counted per reason in ``out_dir/rejections.csv``.
    """
    listing = Path(listing)
    out = Path(out_dir)
    reals_dir = out / "reals"
    reals_dir.mkdir(parents=True, exist_ok=True)

    try:
        with open(annotation_file) as fh:
            coco = json.load(fh)
        images = {im["file_name"]: im for im in coco["images"]}
        categories = {c["id"]: c for c in coco["categories"]}
        licenses = {l["id"]: l.get("name", "") for l in coco.get("licenses", [])}
        by_image: dict[int, list[dict]] = {}
        for ann in coco["annotations"]:
            by_image.setdefault(ann["image_id"], []).append(ann)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"malformed annotation file {annotation_file}: {exc}") from exc

    if listing.is_dir():
        paths = sorted(p for p in listing.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    else:
        with open(listing) as fh:
            paths = [Path(line.strip()) for line in fh if line.strip()]

    manifest = DatasetManifest(
        taxonomy={c["name"]: c.get("supercategory", c["name"]) for c in categories.values()},
        provenance={"source_tag": source_tag, "min_objects": min_objects},
    )
    rejections: list[tuple[str, str]] = []

    for path in paths:
        name = path.name
        info = images.get(name)
        if info is None:
            rejections.append((name, "not_in_annotation_index"))
            continue
        lic = licenses.get(info.get("license"), "")
        if not license_filter(lic):
            rejections.append((name, "license"))
            continue
        try:
            image = imgio.load_rgb(path)
        except OSError as exc:
            log.warning("skipping unreadable file %s: %s", path, exc)
            rejections.append((name, "unreadable"))
            continue

        height, width = image.shape[:2]
        cx, cy, side, _ = largest_central_crop(width, height)
        crop = image[cy : cy + side, cx : cx + side]

        record_id = f"{source_tag}-{info['id']}"
        kept_annotations = []
        for index, ann in enumerate(by_image.get(info["id"], [])):
            full = _segmentation_to_mask(ann["segmentation"], height, width)
            sub = full[cy : cy + side, cx : cx + side]
            if sub.sum() == 0 or sub.all():
                continue
            cat = categories[ann["category_id"]]
            kept_annotations.append(
                ObjectAnnotation(
                    record_id=record_id,
                    category=cat["name"],
                    supercategory=cat.get("supercategory", cat["name"]),
                    mask=encode_rle(sub),
                    bbox=tight_bbox(sub),
                )
            )
        if len(kept_annotations) < min_objects:
            rejections.append((name, "no_objects"))
            continue

        out_path = reals_dir / f"{record_id}.png"
        imgio.save_png(crop, out_path)
        manifest.records.append(
            ImageRecord(
                id=record_id,
                path=str(out_path),
                label="real",
                pair_id=record_id,
                variant=REAL_VARIANT,
                generator_tag="",
                source_tag=source_tag,
                width=side,
                height=side,
                container="png",
            )
        )
        manifest.annotations.extend(kept_annotations)

    with open(out / "rejections.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "reason"])
        writer.writerows(rejections)

    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# Variant planning and sampling
# ---------------------------------------------------------------------------


def select_editable_object(record: ImageRecord, annotations: list[ObjectAnnotation]) -> ObjectAnnotation:
    """Deterministic object choice: largest mask area, ties broken by lowest
    category string, then lowest annotation index."""
    candidates = [a for a in annotations if a.record_id == record.id]
    if not candidates:
        raise ManifestError(f"no editable object for record {record.id}")
    best_index = min(
        range(len(candidates)),
        key=lambda i: (-candidates[i].area(), candidates[i].category, i),
    )
    return candidates[best_index]


def plan_fake_variants(
    manifest: DatasetManifest, seed: int, steps: int | None = None, guidance: float | None = None
) -> "list[GenerationJob]":
    """Emit the six generation jobs for every real record.

    Per-job seeds derive from (seed, record id, variant) via the keyed
    64-bit hash, so two plans from the same seed are identical.  Jobs carry
    their prompt and mask kind; pixel data is attached only at execution
    time.
    """
    from .genclient import GenerationJob, replacement_category, DEFAULT_STEPS, DEFAULT_GUIDANCE

    steps = DEFAULT_STEPS if steps is None else steps
    guidance = DEFAULT_GUIDANCE if guidance is None else guidance

    annotations_by_record: dict[str, list[ObjectAnnotation]] = {}
    for a in manifest.annotations:
        annotations_by_record.setdefault(a.record_id, []).append(a)

    jobs: list[GenerationJob] = []
    for record in manifest.reals():
        record_annotations = annotations_by_record.get(record.id, [])
        if not record_annotations:
            raise ManifestError(f"real record without annotation: {record.id}")
        target = select_editable_object(record, record_annotations)
        for base in ("self_cond", "inpaint_same", "inpaint_diff"):
            base_seed = rng.derive_seed(seed, record.id, base)
            if base == "self_cond":
                prompt, category, mask_kind = "", None, "empty"
            else:
                mode = "same" if base == "inpaint_same" else "different"
                category = replacement_category(target.category, mode, manifest.taxonomy, base_seed)
                prompt = f"a photo of a {category}"
                mask_kind = "segmentation" if mode == "same" else "bbox"
            jobs.append(
                GenerationJob(
                    job_id=f"{record.id}:{base}",
                    record_id=record.id,
                    variant=base,
                    seed=base_seed,
                    prompt=prompt,
                    category=category,
                    mask_kind=mask_kind,
                    steps=steps,
                    guidance=guidance,
                )
            )
            # the _bg sibling composites the base output through the object
            # mask (segmentation for whole-image variants, bbox for
            # different-category edits) and needs no generation call
            jobs.append(
                GenerationJob(
                    job_id=f"{record.id}:{base}_bg",
                    record_id=record.id,
                    variant=f"{base}_bg",
                    seed=rng.derive_seed(seed, record.id, f"{base}_bg"),
                    prompt=prompt,
                    category=category,
                    mask_kind="segmentation" if mask_kind == "empty" else mask_kind,
                    steps=steps,
                    guidance=guidance,
                    depends_on=f"{record.id}:{base}",
                )
            )
    return jobs


def balanced_batches(
    manifest: DatasetManifest, batch_size: int, seed: int, variants: tuple[str, ...] | None = None
) -> Iterator[list[ImageRecord]]:
    """One epoch of class-balanced batches: batch_size/2 reals and fakes each.

    Reals appear at most once per epoch; fake slots draw a variant uniformly
    (over those present) and then a fake of that variant uniformly, so no
    variant dominates.  The epoch ends when the reals run out.
    """
    if batch_size % 2 != 0 or batch_size < 2:
        raise ManifestError("batch_size must be a positive even number")
    reals = manifest.reals()
    fakes = manifest.fakes()
    if variants is not None:
        fakes = [f for f in fakes if f.variant in variants]
    if not reals or not fakes:
        raise ManifestError("balanced batches need both classes")

    by_variant: dict[str, list[ImageRecord]] = {}
    for f in fakes:
        by_variant.setdefault(f.variant, []).append(f)
    variant_names = sorted(by_variant)

    half = batch_size // 2
    gen = rng.stream(seed, "balanced_batches")
    order = gen.permutation(len(reals))
    for start in range(0, len(reals) - half + 1, half):
        batch = [reals[i] for i in order[start : start + half]]
        for _ in range(half):
            variant = variant_names[int(gen.integers(len(variant_names)))]
            pool = by_variant[variant]
            batch.append(pool[int(gen.integers(len(pool)))])
        yield batch
