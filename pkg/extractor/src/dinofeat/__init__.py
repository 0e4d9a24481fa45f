"""Patch-feature extraction for the reference-prior detector.

Turns images into fixed-shape patch-feature files (the detector's binary
format), optionally corrupting pixels first (JPEG recompression, resize,
Gaussian blur) for robustness studies. Encoders are deterministic, so
re-extraction reproduces files byte for byte.
"""

from .corrupt import CorruptionSpec, corrupt, parse_corruption
from .encoder import ENCODERS, EncoderInfo, SeededPatchEncoder, load_encoder
from .errors import EncoderUnavailable, ExtractError, InvalidCorruption
from .extract import ExtractJob, center_crop, extract, load_image
from .formats import feature_file_bytes, write_feature_file, write_manifest

__all__ = [
    "ENCODERS",
    "CorruptionSpec",
    "EncoderInfo",
    "EncoderUnavailable",
    "ExtractError",
    "ExtractJob",
    "InvalidCorruption",
    "SeededPatchEncoder",
    "center_crop",
    "corrupt",
    "extract",
    "feature_file_bytes",
    "load_encoder",
    "load_image",
    "parse_corruption",
    "write_feature_file",
    "write_manifest",
]
