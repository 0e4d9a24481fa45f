"""Writers for the detector's on-disk formats.

Implemented here from the format definition rather than imported from the
detector package, so the extractor stays a standalone producer; the
interop tests parse these bytes with the detector's own reader.

Feature file: little-endian header (magic 'MIRF', version, n_rows,
n_cols, dtype code 1 = float32), row-major float32 payload, then a
CRC-32 of the payload. Manifest: JSON with sorted keys; each
item row carries id, label, path, and the corruption tag that produced
it; undecodable inputs are recorded under 'skipped'.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ExtractError

MAGIC = b"MIRF"
VERSION = 1
DTYPE_F32 = 1
HEADER = struct.Struct("<4sIIII")
MANIFEST_VERSION = 1


def feature_file_bytes(features: np.ndarray) -> bytes:
    if features.ndim != 2 or features.dtype != np.float32:
        raise ExtractError(
            f"features must be 2-D float32, got {features.dtype} "
            f"{features.shape}"
        )
    n, d = features.shape
    head = HEADER.pack(MAGIC, VERSION, n, d, DTYPE_F32)
    payload = np.ascontiguousarray(features, dtype="<f4").tobytes()
    return head + payload + struct.pack("<I", zlib.crc32(payload))


def _atomic_write(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def write_feature_file(path: str | Path, features: np.ndarray) -> None:
    _atomic_write(Path(path), feature_file_bytes(features))


def write_manifest(path: str | Path, items: list[dict],
                   skipped: list[dict]) -> None:
    obj = {
        "version": MANIFEST_VERSION,
        "items": sorted(items, key=lambda it: it["id"]),
        "skipped": sorted(skipped, key=lambda it: it["path"]),
    }
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"
    _atomic_write(Path(path), blob.encode())
