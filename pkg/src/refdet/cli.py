"""Operator entry point: one subcommand per pipeline stage.

Machine-readable JSON goes to stdout, log lines (the only place
timestamps appear) go to stderr. Identical argv plus identical inputs
produce byte-identical stdout and output files.

Exit codes: 0 success, 1 contract violation or bad usage, 2 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .curation import CurationConfig, curate, read_trial_log
from .detector import (
    MODES,
    DetectorConfig,
    Phase2Config,
    detector_fingerprint,
    detector_from_tensors,
    detector_to_tensors,
    init_detector,
    score,
    train_phase2,
)
from .errors import ContractViolation, StoreError
from .evalkit import (
    SyntheticSpec,
    evaluate_detector,
    make_synthetic_dataset,
    peak_value,
    prototype_sweep,
    topk_sweep,
)
from .phase1 import Phase1Config, train_phase1
from .prior import (
    PriorConfig,
    fingerprint,
    init_prior,
    prior_from_tensors,
    prior_to_tensors,
)
from .store import (
    GENERATED,
    REAL,
    Manifest,
    ManifestItem,
    canonical_json,
    load_archive,
    load_samples,
    read_feature_file,
    save_archive,
    write_feature_file,
    write_manifest,
)

log = logging.getLogger("refdet")


class _Parser(argparse.ArgumentParser):
    # usage errors are caller mistakes, not I/O failures: exit 1, not 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")

    subcommands: dict[str, argparse.ArgumentParser]


def _emit(obj: dict) -> None:
    sys.stdout.write(canonical_json(obj).decode("utf-8") + "\n")


def _run_fingerprint(args: argparse.Namespace) -> str:
    """Hash of the resolved run parameters; lands in every output."""
    resolved = {
        k: v for k, v in sorted(vars(args).items())
        if k not in ("func", "config") and not callable(v)
    }
    return hashlib.sha256(canonical_json(resolved)).hexdigest()[:16]


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise StoreError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise StoreError("config file must hold a JSON object")
    return obj


def _provenance(args: argparse.Namespace) -> dict:
    return {
        "config_fingerprint": _run_fingerprint(args),
        "config_echo": getattr(args, "config_echo", {}),
    }


def _spec_from_args(args: argparse.Namespace) -> SyntheticSpec:
    sparsity_range = None
    if args.sparsity_range is not None:
        lo, hi = args.sparsity_range
        sparsity_range = (lo, hi)
    return SyntheticSpec(
        feature_dim=args.feature_dim,
        n_true_prototypes=args.true_prototypes,
        sparsity=args.sparsity,
        n_patches=args.patches,
        noise_sigma=args.noise_sigma,
        off_manifold_norm=args.off_manifold_norm,
        n_real=args.n_real,
        n_fake=args.n_fake,
        support_pool=args.support_pool,
        sparsity_range=sparsity_range,
    )


def _add_spec_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--feature-dim", type=int, default=128)
    p.add_argument("--true-prototypes", type=int, default=64)
    p.add_argument("--sparsity", type=int, default=4)
    p.add_argument("--patches", type=int, default=16)
    p.add_argument("--noise-sigma", type=float, default=0.01)
    p.add_argument("--off-manifold-norm", type=float, default=0.5)
    p.add_argument("--n-real", type=int, default=2000)
    p.add_argument("--n-fake", type=int, default=2000)
    p.add_argument("--support-pool", type=int, default=None)
    p.add_argument("--sparsity-range", type=int, nargs=2, default=None,
                   metavar=("LO", "HI"))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_make_synthetic(args: argparse.Namespace) -> int:
    spec = _spec_from_args(args)
    reals, fakes, _ = make_synthetic_dataset(spec, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items = []
    for s in reals + fakes:
        rel = f"{s.image_id}.mirf"
        write_feature_file(out / rel, s.features)
        items.append(ManifestItem(s.image_id, rel, s.label))
    write_manifest(out / "manifest.json", Manifest(items=items))
    log.info("wrote %d real + %d generated feature files to %s",
             len(reals), len(fakes), out)
    _emit({
        "n_real": len(reals),
        "n_fake": len(fakes),
        "manifest": str(out / "manifest.json"),
        **_provenance(args),
    })
    return 0


def _load_split(manifest: str) -> tuple[list, list]:
    samples = load_samples(manifest)
    reals = [s for s in samples if s.label == REAL]
    fakes = [s for s in samples if s.label == GENERATED]
    return reals, fakes


def cmd_train_prior(args: argparse.Namespace) -> int:
    samples = load_samples(args.features)
    if args.filter_real:
        samples = [s for s in samples if s.label == REAL]
    if not samples:
        raise ContractViolation("manifest yields no training samples")
    d = samples[0].features.data.shape[1]
    prior = init_prior(
        PriorConfig(n_prototypes=args.K, feature_dim=d, top_k=args.topk),
        seed=args.seed,
    )
    cfg = Phase1Config(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        lambda_ortho=args.lambda_ortho, weight_decay=args.weight_decay,
        holdout_frac=args.holdout_frac, seed=args.seed,
    )
    trained, report = train_phase1(prior, samples, cfg)
    config, tensors = prior_to_tensors(trained)
    config["config_echo"] = args.config_echo
    save_archive(args.out, config, tensors)
    log.info("prior trained: holdout %.3g -> %.3g, checkpoint %s",
             report.holdout_before, report.holdout_after, args.out)
    _emit({
        "checkpoint": args.out,
        "model_fingerprint": fingerprint(trained),
        "n_train": report.n_train,
        "n_holdout": report.n_holdout,
        "n_steps": report.n_steps,
        "holdout_before": report.holdout_before,
        "holdout_after": report.holdout_after,
        "final_penalty": report.final_penalty,
        "epoch_losses": report.epoch_losses,
        **_provenance(args),
    })
    return 0


def cmd_train_detector(args: argparse.Namespace) -> int:
    prior = prior_from_tensors(*load_archive(args.prior))
    samples = load_samples(args.features)
    det = init_detector(
        prior,
        DetectorConfig(evidence_dim=args.evidence_dim,
                       hidden_dim=args.hidden_dim, mode=args.mode),
        seed=args.seed,
    )
    cfg = Phase2Config(epochs=args.epochs, batch_size=args.batch_size,
                       lr=args.lr, seed=args.seed)
    det, report = train_phase2(det, samples, cfg)
    config, tensors = detector_to_tensors(det)
    config["config_echo"] = args.config_echo
    save_archive(args.out, config, tensors)
    log.info("detector trained: bce %.4f, checkpoint %s",
             report.train_bce, args.out)
    _emit({
        "checkpoint": args.out,
        "model_fingerprint": detector_fingerprint(det),
        "mode": args.mode,
        "n_steps": report.n_steps,
        "train_bce": report.train_bce,
        **_provenance(args),
    })
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    det = detector_from_tensors(*load_archive(args.ckpt))
    feats = read_feature_file(args.features)
    result = score(det, feats)
    out = {
        "y_pred": result.y_pred,
        "is_generated": result.is_generated,
        "s_max": result.s_max,
        "s_ent": result.s_ent,
        "model_fingerprint": detector_fingerprint(det),
        **_provenance(args),
    }
    if args.emit_heatmap:
        out["heatmap"] = [list(map(float, row)) for row in result.heatmap()]
    _emit(out)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    det = detector_from_tensors(*load_archive(args.ckpt))
    samples = load_samples(args.features)
    report = evaluate_detector(det, samples)
    _emit({
        "balanced_accuracy": report.balanced_accuracy,
        "n_real": report.n_real,
        "n_generated": report.n_generated,
        "mean_pred_real": report.mean_pred_real,
        "mean_pred_generated": report.mean_pred_generated,
        "model_fingerprint": detector_fingerprint(det),
        **_provenance(args),
    })
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    spec = _spec_from_args(args)
    values = tuple(args.values)
    if args.kind == "prototypes":
        points = prototype_sweep(spec, values=values, seed=args.seed,
                                 top_k=args.topk)
    else:
        points = topk_sweep(spec, values=values, seed=args.seed,
                            n_prototypes=args.K)
    log.info("%s sweep over %s done", args.kind, list(values))
    _emit({
        "kind": args.kind,
        "points": [{"value": p.value, "auc": p.auc} for p in points],
        "peak": peak_value(points),
        **_provenance(args),
    })
    return 0


def cmd_curate(args: argparse.Namespace) -> int:
    trials = read_trial_log(args.trials)
    cfg = CurationConfig(
        tau_real=args.tau_real,
        include_real_in_stats=args.include_real_in_stats,
        cohort_filter=args.cohort,
    )
    result = curate(trials, cfg)
    out = Path(args.out)
    out.write_text("".join(i + "\n" for i in result.selected_ids))
    stats = {
        "tau_real": cfg.tau_real,
        "mu_rt_ms": result.mu_rt_ms,
        "sigma_rt_ms": result.sigma_rt_ms,
        "n_images": len(result.images),
        "n_generated": sum(
            1 for im in result.images if im.ground_truth == GENERATED),
        "n_selected": len(result.selected_ids),
        "out": str(out),
        **_provenance(args),
    }
    Path(str(out) + ".stats.json").write_bytes(canonical_json(stats) + b"\n")
    log.info("curated %d of %d generated images into %s",
             stats["n_selected"], stats["n_generated"], out)
    _emit(stats)
    return 0


def cmd_inspect_checkpoint(args: argparse.Namespace) -> int:
    config, tensors = load_archive(args.ckpt)
    kind = config.get("kind", "unknown")
    if kind == "reference_prior":
        model_fp = fingerprint(prior_from_tensors(config, tensors))
    elif kind == "detector":
        model_fp = detector_fingerprint(detector_from_tensors(config, tensors))
    else:
        raise ContractViolation(f"unrecognized checkpoint kind {kind!r}")
    _emit({
        "kind": kind,
        "archive_config": config,
        "tensors": [
            {"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)}
            for name, arr in sorted(tensors.items())
        ],
        "model_fingerprint": model_fp,
        **_provenance(args),
    })
    return 0


# ---------------------------------------------------------------------------
# Parser assembly
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="refdet", description=__doc__)
    parser.subcommands = {}
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", default=None,
                        help="JSON file with flag defaults; echoed in outputs")

    p = sub.add_parser("make-synthetic", parents=[common],
                       help="generate a planted-manifold dataset")
    _add_spec_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("train-prior", parents=[common],
                       help="fit the memory bank on real features")
    p.add_argument("--features", required=True, help="manifest path")
    p.add_argument("--K", type=int, default=64)
    p.add_argument("--topk", type=int, default=8)
    p.add_argument("--lambda", dest="lambda_ortho", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--holdout-frac", type=float, default=0.1)
    p.add_argument("--filter-real", action="store_true",
                   help="drop generated samples instead of refusing them")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_prior)

    p = sub.add_parser("train-detector", parents=[common],
                       help="fit evidence heads on top of a frozen prior")
    p.add_argument("--prior", required=True, help="prior checkpoint")
    p.add_argument("--features", required=True, help="manifest path")
    p.add_argument("--mode", choices=MODES, default="full")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--evidence-dim", type=int, default=8)
    p.add_argument("--hidden-dim", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("score", parents=[common],
                       help="score one feature file")
    p.add_argument("--ckpt", required=True, help="detector checkpoint")
    p.add_argument("--features", required=True, help="feature file")
    p.add_argument("--emit-heatmap", action="store_true")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", parents=[common],
                       help="balanced accuracy over a labeled manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--features", required=True, help="manifest path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common],
                       help="bank-size or top-k sensitivity sweep")
    _add_spec_flags(p)
    p.add_argument("--kind", choices=("prototypes", "topk"), required=True)
    p.add_argument("--values", type=int, nargs="+", required=True)
    p.add_argument("--K", type=int, default=64,
                   help="bank size for topk sweeps")
    p.add_argument("--topk", type=int, default=8,
                   help="top-k for prototype sweeps")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("curate", parents=[common],
                       help="select the human-deceiving hard subset")
    p.add_argument("--trials", required=True, help="trial log (JSON lines)")
    p.add_argument("--tau-real", type=float, default=4.0)
    p.add_argument("--include-real-in-stats", action="store_true")
    p.add_argument("--cohort", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("inspect-checkpoint", parents=[common],
                       help="list a checkpoint's config and tensors")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_inspect_checkpoint)

    parser.subcommands = dict(sub.choices)
    return parser


def _coerced_defaults(args: argparse.Namespace, config: dict) -> dict:
    """Config values typed like the flags they replace; junk keys skipped."""
    defaults = {}
    for key, value in config.items():
        if not hasattr(args, key):
            continue
        current = getattr(args, key)
        try:
            if isinstance(current, bool):
                defaults[key] = bool(value)
            elif isinstance(current, int):
                defaults[key] = int(value)
            elif isinstance(current, float):
                defaults[key] = float(value)
            elif isinstance(current, str):
                defaults[key] = str(value)
            else:
                defaults[key] = value
        except (TypeError, ValueError) as exc:
            raise ContractViolation(
                f"config key {key!r}: cannot use value {value!r}") from exc
    return defaults


def run(argv: list[str] | None = None) -> int:
    if not logging.getLogger().handlers:
        logging.basicConfig(
            stream=sys.stderr, level=logging.INFO,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        try:
            config = _load_config_file(args.config)
            if config:
                # config supplies defaults only: re-parse with the defaults
                # planted on the chosen subcommand so explicit flags win.
                fresh = build_parser()
                fresh.subcommands[args.command].set_defaults(
                    **_coerced_defaults(args, config))
                args = fresh.parse_args(argv)
            args.config_echo = config
            return args.func(args)
        except ContractViolation as exc:
            log.error("contract violation: %s", exc)
            return 1
        except (StoreError, OSError) as exc:
            log.error("i/o failure: %s", exc)
            return 2
    except SystemExit as exc:
        return int(exc.code or 0)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
