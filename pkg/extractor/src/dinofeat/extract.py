"""Batch extraction: images -> corrupted pixels -> patch features on disk."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .corrupt import CROP_SIZE, CorruptionSpec, _center_crop, corrupt, parse_corruption
from .encoder import load_encoder
from .errors import ExtractError
from .formats import write_feature_file, write_manifest

log = logging.getLogger("dinofeat")

REAL = 0
GENERATED = 1


@dataclass(frozen=True)
class ExtractJob:
    inputs: tuple[Path, ...]
    out_dir: Path
    encoder: str = "seeded-large"
    corruption: str = "clean"
    label: int = REAL
    manifest_name: str = "manifest.json"

    def __post_init__(self) -> None:
        if self.label not in (REAL, GENERATED):
            raise ExtractError(f"label must be {REAL} or {GENERATED}")
        if not self.inputs:
            raise ExtractError("no input images")


def load_image(path: Path) -> Image.Image:
    img = Image.open(path)
    img.load()
    return img.convert("RGB")


def center_crop(img: Image.Image, size: int = CROP_SIZE) -> Image.Image:
    return _center_crop(img, size)


def extract(job: ExtractJob) -> Path:
    """Run the job; returns the manifest path.

    Undecodable images become warning rows and the rest proceed; a feature
    matrix that violates the encoder's shape promise aborts the whole run,
    since that means the encoder itself is broken.
    """
    spec: CorruptionSpec = parse_corruption(job.corruption)
    encoder = load_encoder(job.encoder)
    info = encoder.info
    job.out_dir.mkdir(parents=True, exist_ok=True)

    items, skipped = [], []
    for path in job.inputs:
        try:
            img = load_image(path)
        except (OSError, UnidentifiedImageError) as exc:
            log.warning("skipping %s: %s", path, exc)
            skipped.append({"path": str(path), "reason": str(exc)})
            continue
        img = corrupt(img, spec)
        img = center_crop(img, info.input_size)
        feats = encoder.encode(np.asarray(img, dtype=np.uint8))
        if feats.shape != (info.n_patches, info.dim):
            raise ExtractError(
                f"{job.encoder} promised {(info.n_patches, info.dim)}, "
                f"produced {feats.shape} for {path}"
            )
        image_id = path.stem
        out_name = f"{image_id}.mirf"
        write_feature_file(job.out_dir / out_name, feats)
        items.append({
            "id": image_id,
            "label": job.label,
            "path": out_name,
            "corruption": spec.tag,
        })

    manifest_path = job.out_dir / job.manifest_name
    write_manifest(manifest_path, items, skipped)
    log.info("wrote %d feature files (%d skipped) to %s",
             len(items), len(skipped), job.out_dir)
    return manifest_path
