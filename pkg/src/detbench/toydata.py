"""Seeded synthetic scenes with object annotations.

Fixture corpus for tests and smoke runs: images with controllable spectral
content (smooth blob scenes vs power-law textures) carrying simple shape
objects whose exact masks double as COCO-style annotations.  Everything is a
pure function of the seed.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import imgio, rng
from .manifest import DatasetManifest, ImageRecord, ObjectAnnotation, encode_rle, tight_bbox

TOY_CATEGORIES = [
    {"id": 1, "name": "circle", "supercategory": "shape"},
    {"id": 2, "name": "square", "supercategory": "shape"},
    {"id": 3, "name": "triangle", "supercategory": "shape"},
    {"id": 4, "name": "stripes", "supercategory": "pattern"},
    {"id": 5, "name": "dots", "supercategory": "pattern"},
    {"id": 6, "name": "person", "supercategory": "person"},
]

TOY_LICENSES = [
    {"id": 1, "name": "Attribution License (CC BY 2.0)"},
    {"id": 2, "name": "All Rights Reserved"},
]

_CATEGORY_IDS = {c["name"]: c["id"] for c in TOY_CATEGORIES}


def _background(gen: np.random.Generator, height: int, width: int, style: str) -> np.ndarray:
    if style == "texture":
        # power-law texture: rich content across the whole spectrum
        alpha = gen.uniform(1.5, 2.5)
        fy = np.fft.fftfreq(height)[:, None]
        fx = np.fft.fftfreq(width)[None, :]
        radius = np.hypot(fy, fx)
        radius[0, 0] = 1.0
        channels = []
        for _ in range(3):
            noise = np.fft.fft2(gen.normal(size=(height, width)))
            shaped = np.real(np.fft.ifft2(noise / radius**alpha))
            shaped = (shaped - shaped.mean()) / (shaped.std() + 1e-9)
            channels.append(128.0 + 36.0 * shaped)
        return np.stack(channels, axis=-1)
    # smooth blob scene: two-color gradient plus large soft bumps
    c0 = gen.uniform(40, 215, 3)
    c1 = gen.uniform(40, 215, 3)
    ramp = np.linspace(0.0, 1.0, width)[None, :, None]
    base = c0[None, None, :] * (1 - ramp) + c1[None, None, :] * ramp
    bumps = gaussian_filter(gen.normal(size=(height, width)), sigma=min(height, width) / 8.0)
    bumps = bumps / (np.abs(bumps).max() + 1e-9)
    return base + 40.0 * bumps[:, :, None]


def _draw_object(gen: np.random.Generator, canvas: np.ndarray, category: str) -> np.ndarray:
    height, width = canvas.shape[:2]
    side = int(gen.integers(min(height, width) // 6, min(height, width) // 3))
    cx = int(gen.integers(side, width - side))
    cy = int(gen.integers(side, height - side))
    ys, xs = np.indices((height, width))
    if category in ("circle", "dots", "person"):
        mask = ((ys - cy) ** 2 + (xs - cx) ** 2) <= (side // 2) ** 2
    elif category in ("square", "stripes"):
        mask = (np.abs(ys - cy) <= side // 2) & (np.abs(xs - cx) <= side // 2)
    else:  # triangle
        mask = (ys >= cy - side // 2) & (ys - (cy - side // 2) >= 2 * np.abs(xs - cx)) & (ys <= cy + side // 2)
    color = gen.uniform(20, 235, 3)
    canvas[mask] = color[None, :]
    return mask.astype(np.uint8)


def toy_scene(
    seed: int, width: int = 160, height: int = 160, style: str = "blobs", n_objects: int = 2
) -> tuple[np.ndarray, list[tuple[str, np.ndarray]]]:
    """One synthetic scene plus its (category, mask) object list."""
    gen = rng.stream(seed, "toy_scene", style)
    canvas = _background(gen, height, width, style)
    objects = []
    names = [c["name"] for c in TOY_CATEGORIES]
    for _ in range(n_objects):
        category = names[int(gen.integers(len(names)))]
        mask = _draw_object(gen, canvas, category)
        if 0 < mask.sum() < mask.size:
            objects.append((category, mask))
    image = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    return image, objects


def write_toy_coco(
    out_dir: str | Path,
    n_images: int,
    seed: int,
    width_range: tuple[int, int] = (160, 220),
    height_range: tuple[int, int] = (140, 200),
    style: str = "blobs",
    cc_fraction: float = 1.0,
    object_free_fraction: float = 0.0,
) -> Path:
    """Write a toy image directory plus COCO-style instances.json; returns
    the annotation path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gen = rng.stream(seed, "toy_coco")
    images, annotations = [], []
    ann_id = 1
    for i in range(n_images):
        w = int(gen.integers(width_range[0], width_range[1] + 1))
        h = int(gen.integers(height_range[0], height_range[1] + 1))
        n_objects = 0 if gen.random() < object_free_fraction else 2
        image, objects = toy_scene(rng.derive_seed(seed, "scene", i), w, h, style, n_objects)
        name = f"toy_{i:05d}.png"
        imgio.save_png(image, out / name)
        license_id = 1 if gen.random() < cc_fraction else 2
        images.append({"id": i + 1, "file_name": name, "width": w, "height": h, "license": license_id})
        for category, mask in objects:
            x, y, bw, bh = tight_bbox(mask)
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": i + 1,
                    "category_id": _CATEGORY_IDS[category],
                    "segmentation": encode_rle(mask),
                    "bbox": [x, y, bw, bh],
                    "area": int(mask.sum()),
                    "iscrowd": 0,
                }
            )
            ann_id += 1
    coco = {
        "images": images,
        "annotations": annotations,
        "categories": TOY_CATEGORIES,
        "licenses": TOY_LICENSES,
    }
    path = out / "instances.json"
    with open(path, "w") as fh:
        json.dump(coco, fh)
    return path


def toy_real_manifest(
    out_dir: str | Path,
    n_images: int,
    seed: int,
    size: int = 160,
    style: str = "blobs",
    source_tag: str = "toy",
) -> DatasetManifest:
    """Square real-image manifest written directly (no ingestion pass)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(
        taxonomy={c["name"]: c["supercategory"] for c in TOY_CATEGORIES},
        provenance={"source_tag": source_tag, "style": style},
    )
    for i in range(n_images):
        image, objects = toy_scene(rng.derive_seed(seed, "scene", i), size, size, style)
        record_id = f"{source_tag}-{i:05d}"
        path = out / f"{record_id}.png"
        imgio.save_png(image, path)
        manifest.records.append(
            ImageRecord(
                id=record_id,
                path=str(path),
                label="real",
                pair_id=record_id,
                variant="real",
                generator_tag="",
                source_tag=source_tag,
                width=size,
                height=size,
                container="png",
            )
        )
        for category, mask in objects:
            manifest.annotations.append(
                ObjectAnnotation(
                    record_id=record_id,
                    category=category,
                    supercategory=manifest.taxonomy[category],
                    mask=encode_rle(mask),
                    bbox=tight_bbox(mask),
                )
            )
    manifest.validate()
    return manifest
