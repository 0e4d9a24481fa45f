"""On-disk formats: feature files, tensor archives, dataset manifests.

Everything is little-endian and byte-stable: writing the same content twice
produces identical bytes, and every reader verifies integrity (CRC32 for
feature payloads, SHA-256 for archives) before returning data. Writes go
through a temp file and os.replace, so a crash never leaves a half-written
file at the target path.

Feature file layout (24 + 4*N*D bytes for float32):

    magic   4s   b"MIRF"
    version u32  1
    n_rows  u32
    n_cols  u32
    dtype   u32  1 = float32
    payload      row-major values
    crc32   u32  zlib.crc32 of payload

Archive layout:

    magic      4s   b"MIRC"
    version    u32  1
    header_len u32
    header          canonical JSON: {"config": ..., "tensors": [...]}
    payload         tensor bytes at the offsets named in the header
    sha256     32s  digest of every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    ConfigMismatch,
    ContractViolation,
    CrcMismatch,
    HashMismatch,
    StoreError,
    TruncatedFile,
    UnsupportedDtype,
)
from .numerics import Tensor2

FEATURE_MAGIC = b"MIRF"
ARCHIVE_MAGIC = b"MIRC"
FORMAT_VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 1}
_CODE_DTYPES = {1: np.dtype(np.float32)}

_ARCHIVE_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}

REAL = 0
GENERATED = 1


@dataclass(frozen=True)
class Sample:
    """One image's patch features plus its ground-truth label."""

    features: Tensor2
    label: int
    image_id: str = ""

    def __post_init__(self) -> None:
        if self.label not in (REAL, GENERATED):
            raise ContractViolation(f"label must be 0 or 1, got {self.label}")


def _atomic_write(path: Path, blob: bytes) -> None:
    tmp = path.with_name(f".{path.name}.tmp.{os.getpid()}")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------


def feature_file_bytes(features: Tensor2) -> bytes:
    """Serialize an N x D float32 feature map to the fixed layout."""
    arr = features.data
    if arr.dtype != np.float32:
        raise UnsupportedDtype(f"feature files hold float32, got {arr.dtype}")
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    head = struct.pack(
        "<4sIIII", FEATURE_MAGIC, FORMAT_VERSION,
        arr.shape[0], arr.shape[1], _DTYPE_CODES[arr.dtype],
    )
    return head + payload + struct.pack("<I", zlib.crc32(payload))


def write_feature_file(path: str | Path, features: Tensor2) -> None:
    _atomic_write(Path(path), feature_file_bytes(features))


def parse_feature_bytes(blob: bytes) -> Tensor2:
    if len(blob) < 24:
        raise TruncatedFile(f"feature file is {len(blob)} bytes, need >= 24")
    magic, version, n, d, code = struct.unpack_from("<4sIIII", blob, 0)
    if magic != FEATURE_MAGIC:
        raise BadMagic(f"expected {FEATURE_MAGIC!r}, got {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedDtype(f"unsupported feature file version {version}")
    if code not in _CODE_DTYPES:
        raise UnsupportedDtype(f"unsupported dtype code {code}")
    dtype = _CODE_DTYPES[code]
    nbytes = n * d * dtype.itemsize
    if len(blob) != 24 + nbytes:
        raise TruncatedFile(f"expected {24 + nbytes} bytes, got {len(blob)}")
    payload = blob[20:20 + nbytes]
    (crc,) = struct.unpack_from("<I", blob, 20 + nbytes)
    if zlib.crc32(payload) != crc:
        raise CrcMismatch("feature payload checksum does not match")
    arr = np.frombuffer(payload, dtype="<f4").reshape(n, d)
    return Tensor2(arr.astype(np.float32))


def read_feature_file(path: str | Path) -> Tensor2:
    return parse_feature_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Tensor archives (model checkpoints)
# ---------------------------------------------------------------------------


def canonical_json(obj) -> bytes:
    """Sorted keys, no whitespace: one byte stream per logical value."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def archive_bytes(config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    entries = []
    payload = bytearray()
    for name in sorted(tensors):
        arr = tensors[name]
        if arr.ndim != 2:
            raise ContractViolation(f"archive tensors must be 2-D: {name}")
        if arr.dtype == np.float32:
            code = "f4"
        elif arr.dtype == np.float64:
            code = "f8"
        else:
            raise UnsupportedDtype(f"tensor {name} has dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_ARCHIVE_DTYPES[code]).tobytes()
        entries.append({
            "name": name, "dtype": code, "shape": list(arr.shape),
            "offset": len(payload), "nbytes": len(raw),
        })
        payload.extend(raw)
    header = canonical_json({"config": config, "tensors": entries})
    head = struct.pack("<4sII", ARCHIVE_MAGIC, FORMAT_VERSION, len(header))
    body = head + header + bytes(payload)
    return body + hashlib.sha256(body).digest()


def save_archive(path: str | Path, config: dict,
                 tensors: dict[str, np.ndarray]) -> None:
    _atomic_write(Path(path), archive_bytes(config, tensors))


def parse_archive_bytes(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 12 + 32:
        raise TruncatedFile(f"archive is {len(blob)} bytes, need >= 44")
    magic, version, header_len = struct.unpack_from("<4sII", blob, 0)
    if magic != ARCHIVE_MAGIC:
        raise BadMagic(f"expected {ARCHIVE_MAGIC!r}, got {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedDtype(f"unsupported archive version {version}")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise HashMismatch("archive digest does not match contents")
    if len(body) < 12 + header_len:
        raise TruncatedFile("archive header runs past end of file")
    try:
        header = json.loads(body[12:12 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise StoreError(f"archive header is not valid JSON: {exc}") from exc
    payload = body[12 + header_len:]
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        dtype = _ARCHIVE_DTYPES.get(entry["dtype"])
        if dtype is None:
            raise UnsupportedDtype(f"tensor {entry['name']}: {entry['dtype']}")
        off, nb = entry["offset"], entry["nbytes"]
        if off + nb > len(payload):
            raise TruncatedFile(f"tensor {entry['name']} runs past end of payload")
        arr = np.frombuffer(payload[off:off + nb], dtype=dtype)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header["config"], tensors


def load_archive(path: str | Path,
                 expected_config: dict | None = None
                 ) -> tuple[dict, dict[str, np.ndarray]]:
    config, tensors = parse_archive_bytes(Path(path).read_bytes())
    if expected_config is not None and config != expected_config:
        raise ConfigMismatch(
            f"archive config {config} != expected {expected_config}"
        )
    return config, tensors


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestItem:
    image_id: str
    path: str
    label: int


@dataclass
class Manifest:
    items: list[ManifestItem] = field(default_factory=list)


def write_manifest(path: str | Path, manifest: Manifest) -> None:
    items = sorted(manifest.items, key=lambda it: it.image_id)
    obj = {
        "version": FORMAT_VERSION,
        "items": [
            {"id": it.image_id, "path": it.path, "label": it.label}
            for it in items
        ],
    }
    _atomic_write(Path(path), canonical_json(obj) + b"\n")


def read_manifest(path: str | Path) -> Manifest:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise StoreError(f"manifest is not valid JSON: {exc}") from exc
    if obj.get("version") != FORMAT_VERSION:
        raise UnsupportedDtype(f"unsupported manifest version {obj.get('version')}")
    items = [
        ManifestItem(image_id=e["id"], path=e["path"], label=int(e["label"]))
        for e in obj["items"]
    ]
    return Manifest(items=items)


def load_samples(manifest_path: str | Path) -> list[Sample]:
    """Read every feature file a manifest names, relative to the manifest."""
    mpath = Path(manifest_path)
    manifest = read_manifest(mpath)
    samples = []
    for it in manifest.items:
        fpath = Path(it.path)
        if not fpath.is_absolute():
            fpath = mpath.parent / fpath
        samples.append(Sample(
            features=read_feature_file(fpath), label=it.label, image_id=it.image_id,
        ))
    return samples
