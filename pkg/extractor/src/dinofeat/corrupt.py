"""Image-space corruptions applied before feature extraction.

All corruptions are deterministic pixel transforms. JPEG and blur keep
the input size (cropping happens at extraction); resize rescales and then
center-crops back to the encoder input size so the patch grid never
changes shape.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

from PIL import Image, ImageFilter

from .errors import InvalidCorruption

JPEG_QF_RANGE = (10, 100)
RESIZE_RANGE = (0.5, 2.0)
BLUR_RANGE = (0.0, 2.0)
CROP_SIZE = 224


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    value: float | None = None

    def __post_init__(self) -> None:
        if self.kind == "clean":
            if self.value is not None:
                raise InvalidCorruption("clean takes no parameter")
        elif self.kind == "jpeg":
            lo, hi = JPEG_QF_RANGE
            if self.value is None or self.value != int(self.value) \
                    or not (lo <= self.value <= hi):
                raise InvalidCorruption(
                    f"jpeg quality must be an integer in [{lo}, {hi}]")
        elif self.kind == "resize":
            lo, hi = RESIZE_RANGE
            if self.value is None or not (lo <= self.value <= hi):
                raise InvalidCorruption(f"resize scale must be in [{lo}, {hi}]")
        elif self.kind == "blur":
            lo, hi = BLUR_RANGE
            if self.value is None or not (lo <= self.value <= hi):
                raise InvalidCorruption(f"blur sigma must be in [{lo}, {hi}]")
        else:
            raise InvalidCorruption(
                f"unknown corruption {self.kind!r}; "
                "expected clean, jpeg, resize, or blur"
            )

    @property
    def tag(self) -> str:
        if self.kind == "clean":
            return "clean"
        if self.kind == "jpeg":
            return f"jpeg:{int(self.value)}"
        return f"{self.kind}:{self.value:g}"


def parse_corruption(text: str) -> CorruptionSpec:
    """'clean', 'jpeg:90', 'resize:0.9', 'blur:1.5' -> CorruptionSpec."""
    kind, sep, raw = text.partition(":")
    if not sep:
        return CorruptionSpec(kind=kind)
    try:
        value = float(raw)
    except ValueError as exc:
        raise InvalidCorruption(f"bad corruption parameter {raw!r}") from exc
    if not math.isfinite(value):
        raise InvalidCorruption(f"bad corruption parameter {raw!r}")
    return CorruptionSpec(kind=kind, value=value)


def _center_crop(img: Image.Image, size: int) -> Image.Image:
    # Upscale the short side first when the image is too small to crop.
    if min(img.size) < size:
        w, h = img.size
        scale = size / min(w, h)
        img = img.resize((max(size, round(w * scale)),
                          max(size, round(h * scale))), Image.BILINEAR)
    w, h = img.size
    left = (w - size) // 2
    top = (h - size) // 2
    return img.crop((left, top, left + size, top + size))


def corrupt(img: Image.Image, spec: CorruptionSpec) -> Image.Image:
    if spec.kind == "clean":
        return img
    if spec.kind == "jpeg":
        buf = io.BytesIO()
        img.convert("RGB").save(buf, format="JPEG", quality=int(spec.value))
        buf.seek(0)
        out = Image.open(buf)
        out.load()
        return out.convert("RGB")
    if spec.kind == "resize":
        w, h = img.size
        scaled = img.resize((max(1, round(w * spec.value)),
                             max(1, round(h * spec.value))), Image.BILINEAR)
        return _center_crop(scaled, CROP_SIZE)
    if spec.kind == "blur":
        if spec.value == 0.0:
            return img
        return img.filter(ImageFilter.GaussianBlur(radius=spec.value))
    raise InvalidCorruption(f"unknown corruption {spec.kind!r}")
