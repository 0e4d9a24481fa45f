"""Stand up a small blinded-trial service for frontend integration tests.

Builds a five-image study in the given work directory (all images are
secretly generated; the ids are opaque so nothing about the labels leaks
through URLs), trains a tiny detector so the checkpoint is real, then serves
the API on the given port. The trial log lands at <workdir>/trials.jsonl so
the test harness can inspect it and run curation on it afterwards.

Usage: python3 serve_fixture.py WORKDIR PORT
"""

from __future__ import annotations

import sys
from pathlib import Path

import uvicorn

from refdet.detector import detector_to_tensors
from refdet.evalkit import (
    SyntheticSpec,
    default_pipeline,
    make_synthetic_dataset,
    train_pipeline,
)
from refdet.service import make_app
from refdet.store import (
    Manifest,
    ManifestItem,
    save_archive,
    write_feature_file,
    write_manifest,
)

N_STUDY = 5


def build_fixture(workdir: Path) -> tuple[Path, Path, Path]:
    data = workdir / "data"
    data.mkdir(parents=True, exist_ok=True)

    spec = SyntheticSpec(
        feature_dim=32, n_true_prototypes=16, sparsity=4, n_patches=8,
        n_real=96, n_fake=48,
    )
    reals, fakes, _ = make_synthetic_dataset(spec, seed=3)
    cfg = default_pipeline(spec, seed=3, n_prototypes=32, top_k=4)
    det, _, _ = train_pipeline(reals, fakes, cfg)

    ckpt = workdir / "det.mirc"
    config, tensors = detector_to_tensors(det)
    save_archive(ckpt, config, tensors)

    # Opaque study ids: participants (and response bodies) must not be able
    # to infer labels from naming.
    items = []
    for i, sample in enumerate(fakes[:N_STUDY], start=1):
        image_id = f"img-{i:03d}"
        name = f"{image_id}.mirf"
        write_feature_file(data / name, sample.features)
        items.append(ManifestItem(image_id=image_id, path=name,
                                  label=sample.label))
    manifest = data / "study.json"
    write_manifest(manifest, Manifest(items=items))

    trial_log = workdir / "trials.jsonl"
    return ckpt, manifest, trial_log


def main() -> int:
    workdir = Path(sys.argv[1])
    port = int(sys.argv[2])
    ckpt, manifest, trial_log = build_fixture(workdir)
    app = make_app(ckpt, manifest, trial_log,
                   snapshot_path=workdir / "sessions.json")
    print(f"fixture ready: {manifest}", flush=True)
    uvicorn.run(app, host="127.0.0.1", port=port, log_level="warning")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
