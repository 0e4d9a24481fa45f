"""Deterministic patch encoders.

An encoder maps a 224x224 RGB image to one feature row per non-overlapping
patch: a 16-pixel patch grid gives 14x14 = 196 rows. The `seeded-*` family
uses a fixed random projection derived from the tag, so it needs no weight
files and reproduces features bit for bit; it stands in for a pretrained
vision transformer wherever only the shape contract and determinism
matter. Plugging in a real pretrained encoder means implementing
`encode(image) -> (n_patches, dim) float32` and registering its info.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import EncoderUnavailable, ExtractError


@dataclass(frozen=True)
class EncoderInfo:
    tag: str
    dim: int
    input_size: int = 224
    patch_size: int = 16

    @property
    def grid(self) -> int:
        return self.input_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid


ENCODERS = {
    "seeded-large": EncoderInfo(tag="seeded-large", dim=1024),
    "seeded-small": EncoderInfo(tag="seeded-small", dim=384),
}

# Known pretrained tags we refuse to fake: constructing them requires the
# actual weight files, which this package does not bundle.
PRETRAINED_TAGS = ("dinov3-large", "dinov2-large")


class SeededPatchEncoder:
    """Fixed random projection of raw patches, tanh-squashed.

    Weights come from a generator seeded by the tag, so two processes (or
    two machines with the same BLAS) produce identical float32 features.
    Pixel values are centered before projection and the projection is
    scaled by 1/sqrt(fan_in), keeping the pre-activation near zero where
    tanh is effectively linear; features stay content-sensitive instead of
    saturating.
    """

    def __init__(self, info: EncoderInfo):
        self.info = info
        fan_in = 3 * info.patch_size * info.patch_size
        seed = int.from_bytes(
            hashlib.blake2s(info.tag.encode(), digest_size=8).digest(), "big")
        rng = np.random.default_rng(seed)
        self.w = (rng.standard_normal((fan_in, info.dim)) /
                  np.sqrt(fan_in)).astype(np.float32)
        self.b = (0.01 * rng.standard_normal(info.dim)).astype(np.float32)

    def encode(self, image: np.ndarray) -> np.ndarray:
        size = self.info.input_size
        if image.shape != (size, size, 3) or image.dtype != np.uint8:
            raise ExtractError(
                f"encoder expects uint8 ({size}, {size}, 3), got "
                f"{image.dtype} {image.shape}"
            )
        p = self.info.patch_size
        g = self.info.grid
        x = image.astype(np.float32) / 255.0 - 0.5
        # (g, p, g, p, 3) -> (g*g, p*p*3), row-major over the patch grid.
        patches = (x.reshape(g, p, g, p, 3)
                    .transpose(0, 2, 1, 3, 4)
                    .reshape(g * g, p * p * 3))
        feats = np.tanh(patches @ self.w + self.b)
        if feats.shape != (self.info.n_patches, self.info.dim):
            raise ExtractError(f"encoder produced {feats.shape}")
        return feats.astype(np.float32)


def load_encoder(tag: str) -> SeededPatchEncoder:
    if tag in ENCODERS:
        return SeededPatchEncoder(ENCODERS[tag])
    if tag in PRETRAINED_TAGS:
        raise EncoderUnavailable(
            f"encoder {tag!r} needs pretrained weights that are not bundled; "
            f"use one of {sorted(ENCODERS)} or register a custom encoder"
        )
    raise EncoderUnavailable(
        f"unknown encoder {tag!r}; available: {sorted(ENCODERS)}")
