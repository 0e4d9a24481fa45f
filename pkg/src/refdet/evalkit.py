"""Evaluation toolkit: synthetic manifold data, metrics, and experiments.

The synthetic generator plants a known sparse-combination manifold so every
downstream claim has a ground-truth oracle: real rows are uniform convex
combinations of `sparsity` orthonormal prototypes (coefficients exactly
1/sparsity), generated rows add an off-manifold perturbation drawn from the
positive cone of the orthocomplement. Because the perturbation is orthogonal
to every prototype, attention logits are untouched by it and the
reconstruction residual carries the entire signal.

Uniform coefficients are load-bearing: softmax attention over equal logits
is exactly uniform, so a bank planted with the true prototypes and sharp
enough projections reconstructs noiseless real rows to machine precision.
That gives an analytic fixed point the learned model can be compared
against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .detector import (
    Detector,
    DetectorConfig,
    Phase2Config,
    Phase2Report,
    _head_logits_np,
    fit_heads,
    init_detector,
    score,
    train_phase2,
)
from .errors import ContractViolation
from .numerics import F32, Tensor2
from .phase1 import Phase1Config, Phase1Report, train_phase1
from .prior import PriorConfig, ReferencePrior, init_prior, project
from .store import GENERATED, REAL, Sample

# ---------------------------------------------------------------------------
# Synthetic manifold
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    feature_dim: int = 128
    n_true_prototypes: int = 64
    sparsity: int = 4
    n_patches: int = 16
    noise_sigma: float = 0.01
    off_manifold_norm: float = 0.5
    n_real: int = 2000
    n_fake: int = 2000
    # When set, each image draws its patch supports from an image-specific
    # pool of this many prototypes instead of all of them. Patches of one
    # image then share content, so reconstruction difficulty varies across
    # images instead of averaging out; sensitivity sweeps rely on this.
    support_pool: int | None = None
    # When set, each image uses its own sparsity drawn uniformly from this
    # inclusive range (coefficients stay exactly 1/s). Row norms then vary
    # across images, so a bank too small to fit the manifold produces
    # image-dependent errors instead of a constant one.
    sparsity_range: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if not (1 <= self.n_true_prototypes < self.feature_dim):
            raise ContractViolation(
                "need 1 <= n_true_prototypes < feature_dim so an "
                "orthocomplement exists for the off-manifold directions"
            )
        if not (1 <= self.sparsity <= self.n_true_prototypes):
            raise ContractViolation("sparsity out of range")
        if self.n_patches < 1 or self.n_real < 0 or self.n_fake < 0:
            raise ContractViolation("bad sample counts")
        if self.noise_sigma < 0:
            raise ContractViolation("noise_sigma must be >= 0")
        if self.off_manifold_norm <= 3.0 * self.noise_sigma:
            raise ContractViolation(
                "off_manifold_norm must exceed 3x noise_sigma or the "
                "planted separation is not meaningful"
            )
        if self.support_pool is not None and not (
                self.sparsity <= self.support_pool <= self.n_true_prototypes):
            raise ContractViolation(
                "support_pool must lie in [sparsity, n_true_prototypes]"
            )
        if self.sparsity_range is not None:
            lo, hi = self.sparsity_range
            cap = self.support_pool or self.n_true_prototypes
            if not (1 <= lo <= hi <= cap):
                raise ContractViolation(
                    "sparsity_range must satisfy 1 <= lo <= hi <= pool size"
                )


@dataclass
class PlantedModel:
    """Ground truth behind a synthetic dataset."""

    prototypes: np.ndarray       # (K_true, D), orthonormal rows
    orthocomplement: np.ndarray  # (D - K_true, D), orthonormal rows


def plant_model(spec: SyntheticSpec, seed: int) -> PlantedModel:
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((spec.feature_dim, spec.feature_dim)))
    kt = spec.n_true_prototypes
    return PlantedModel(
        prototypes=q[:, :kt].T.copy(),
        orthocomplement=q[:, kt:].T.copy(),
    )


def _real_rows(planted: PlantedModel, spec: SyntheticSpec,
               rng: np.random.Generator, n_rows: int) -> np.ndarray:
    kt = spec.n_true_prototypes
    if spec.support_pool is None:
        pool = np.arange(kt)
    else:
        pool = np.argsort(rng.random(kt))[: spec.support_pool]
    if spec.sparsity_range is None:
        s = spec.sparsity
    else:
        lo, hi = spec.sparsity_range
        s = int(rng.integers(lo, hi + 1))
    supports = pool[np.argsort(rng.random((n_rows, pool.size)), axis=1)[:, :s]]
    rows = planted.prototypes[supports].mean(axis=1)
    if spec.noise_sigma > 0:
        rows = rows + rng.standard_normal(rows.shape) * spec.noise_sigma
    return rows


def _off_manifold(planted: PlantedModel, spec: SyntheticSpec,
                  rng: np.random.Generator, n_rows: int) -> np.ndarray:
    # positive-cone coefficients keep the pooled offset direction coherent
    g = np.abs(rng.standard_normal((n_rows, planted.orthocomplement.shape[0])))
    u = g @ planted.orthocomplement
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return spec.off_manifold_norm * u


def synth_samples(
    planted: PlantedModel,
    spec: SyntheticSpec,
    seed: int,
    id_prefix: str = "",
) -> tuple[list[Sample], list[Sample]]:
    """Draw spec.n_real real and spec.n_fake generated samples."""
    rng = np.random.default_rng(seed)
    reals, fakes = [], []
    for i in range(spec.n_real):
        rows = _real_rows(planted, spec, rng, spec.n_patches)
        reals.append(Sample(
            features=Tensor2(rows.astype(F32)), label=REAL,
            image_id=f"{id_prefix}real-{i:05d}",
        ))
    for i in range(spec.n_fake):
        rows = _real_rows(planted, spec, rng, spec.n_patches)
        rows = rows + _off_manifold(planted, spec, rng, spec.n_patches)
        fakes.append(Sample(
            features=Tensor2(rows.astype(F32)), label=GENERATED,
            image_id=f"{id_prefix}gen-{i:05d}",
        ))
    return reals, fakes


def make_synthetic_dataset(
    spec: SyntheticSpec, seed: int
) -> tuple[list[Sample], list[Sample], PlantedModel]:
    planted = plant_model(spec, seed)
    reals, fakes = synth_samples(planted, spec, seed + 1)
    return reals, fakes, planted


def make_planted_prior(
    planted: PlantedModel,
    spec: SyntheticSpec,
    gap: float = 8.0,
    top_k: int | None = None,
) -> ReferencePrior:
    """The analytic optimum: true prototypes as bank, sharp projections.

    Query/key scale alpha is chosen so a support prototype's logit is
    exactly `gap` while non-support logits sit near 0; with top_k equal to
    the sparsity, softmax over the tied support logits is exactly uniform,
    matching the planted 1/sparsity coefficients.
    """
    d = spec.feature_dim
    k = spec.sparsity if top_k is None else top_k
    alpha = math.sqrt(gap * spec.sparsity * math.sqrt(d))
    cfg = PriorConfig(
        n_prototypes=spec.n_true_prototypes, feature_dim=d, top_k=k,
    )
    return ReferencePrior(
        config=cfg,
        m=Tensor2(planted.prototypes.astype(F32)),
        wq=Tensor2((alpha * np.eye(d)).astype(F32)),
        wk=Tensor2((alpha * np.eye(d)).astype(F32)),
        wv=Tensor2(np.eye(d, dtype=F32)),
    )


def relabel_as_real(samples: list[Sample]) -> list[Sample]:
    """Forge labels to REAL. Exists solely to study contaminated bank diets:
    the purity check in phase 1 guards labels as presented, so an experiment
    that wants contamination must lie about the labels explicitly."""
    return [
        Sample(features=s.features, label=REAL, image_id=s.image_id)
        for s in samples
    ]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def balanced_accuracy(y_true: np.ndarray, verdicts: np.ndarray) -> float:
    """Mean of true-positive and true-negative rates at the 0.5 verdict."""
    y = np.asarray(y_true).astype(int).ravel()
    v = np.asarray(verdicts).astype(int).ravel()
    if y.shape != v.shape:
        raise ContractViolation("label/verdict length mismatch")
    if not set(np.unique(y)) <= {0, 1} or not set(np.unique(v)) <= {0, 1}:
        raise ContractViolation("labels and verdicts must be 0/1")
    pos = y == 1
    neg = y == 0
    if not pos.any() or not neg.any():
        raise ContractViolation("balanced accuracy needs both classes")
    tpr = float((v[pos] == 1).mean())
    tnr = float((v[neg] == 0).mean())
    return 0.5 * (tpr + tnr)


def auc_score(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """Rank-based AUC: P(pos > neg) with half credit for ties."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ContractViolation("auc needs scores from both classes")
    ranks = rankdata(np.concatenate([pos, neg]))
    rank_sum = ranks[: pos.size].sum()
    return float((rank_sum - pos.size * (pos.size + 1) / 2.0)
                 / (pos.size * neg.size))


def residual_scores(prior: ReferencePrior, samples: list[Sample]) -> np.ndarray:
    """Per-image mean squared residual entry; the raw phase-1 signal."""
    out = np.empty(len(samples))
    for i, s in enumerate(samples):
        r = project(prior, s.features).residual.data.astype(np.float64)
        out[i] = (r * r).mean()
    return out


def residual_auc(prior: ReferencePrior, reals: list[Sample],
                 fakes: list[Sample]) -> float:
    return auc_score(residual_scores(prior, fakes), residual_scores(prior, reals))


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    prior: PriorConfig
    phase1: Phase1Config
    phase2: Phase2Config
    detector: DetectorConfig = DetectorConfig()
    seed: int = 0


def default_pipeline(
    spec: SyntheticSpec,
    seed: int = 0,
    mode: str = "full",
    n_prototypes: int = 64,
    top_k: int = 8,
) -> PipelineConfig:
    """Desk-scale settings that train in seconds on the synthetic data."""
    return PipelineConfig(
        prior=PriorConfig(
            n_prototypes=n_prototypes, feature_dim=spec.feature_dim, top_k=top_k,
        ),
        phase1=Phase1Config(
            epochs=5, batch_size=8, lr=1e-2, lambda_ortho=0.01,
            weight_decay=0.01, holdout_frac=0.1, seed=seed,
        ),
        phase2=Phase2Config(epochs=60, batch_size=256, lr=1e-2, seed=seed),
        detector=DetectorConfig(mode=mode),
        seed=seed,
    )


def train_pipeline(
    reals: list[Sample],
    fakes: list[Sample],
    cfg: PipelineConfig,
) -> tuple[Detector, Phase1Report, Phase2Report]:
    """Phase 1 on the real samples, phase 2 on both classes."""
    prior = init_prior(cfg.prior, seed=cfg.seed)
    prior, rep1 = train_phase1(prior, reals, cfg.phase1)
    det = init_detector(prior, cfg.detector, seed=cfg.seed)
    det, rep2 = train_phase2(det, reals + fakes, cfg.phase2)
    return det, rep1, rep2


@dataclass
class EvalReport:
    balanced_accuracy: float
    n_real: int
    n_generated: int
    mean_pred_real: float
    mean_pred_generated: float


def evaluate_detector(det: Detector, samples: list[Sample]) -> EvalReport:
    """Score every sample through the full path and tally by class."""
    y_true, verdicts, preds = [], [], []
    for s in samples:
        r = score(det, s.features)
        y_true.append(s.label)
        verdicts.append(1 if r.is_generated else 0)
        preds.append(r.y_pred)
    y = np.array(y_true)
    p = np.array(preds)
    return EvalReport(
        balanced_accuracy=balanced_accuracy(y, np.array(verdicts)),
        n_real=int((y == REAL).sum()),
        n_generated=int((y == GENERATED).sum()),
        mean_pred_real=float(p[y == REAL].mean()),
        mean_pred_generated=float(p[y == GENERATED].mean()),
    )


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

MODES_ORDERED = ("full", "residual_only", "perplexity_only", "baseline")


def _derived_seed(seed: int, tag: int) -> int:
    return 7919 * seed + tag


def _projection_matrices(prior: ReferencePrior, samples: list[Sample]):
    """One projection pass: stats, residual pooling, raw pooling, labels."""
    n = len(samples)
    d = prior.config.feature_dim
    stats = np.zeros((n, 2), dtype=F32)
    pooled_res = np.zeros((n, d), dtype=F32)
    pooled_raw = np.zeros((n, d), dtype=F32)
    labels = np.zeros((n, 1), dtype=F32)
    for i, s in enumerate(samples):
        res = project(prior, s.features)
        stats[i] = [res.s_max, res.s_ent]
        pooled_res[i] = res.pooled_residual()[0]
        pooled_raw[i] = s.features.data.mean(axis=0)
        labels[i, 0] = 1.0 if s.label == GENERATED else 0.0
    return stats, pooled_res, pooled_raw, labels


def _mode_pooled(mode: str, pooled_res: np.ndarray,
                 pooled_raw: np.ndarray) -> np.ndarray:
    return pooled_raw if mode == "baseline" else pooled_res


@dataclass
class AblationReport:
    """Balanced accuracy per evidence wiring, per seed."""

    accuracy: dict[str, list[float]] = field(default_factory=dict)

    def mean(self, mode: str) -> float:
        return float(np.mean(self.accuracy[mode]))

    def ordering_violations(self, order: tuple[str, ...] = (
            "full", "residual_only", "baseline")) -> int:
        """Count seeds where the expected ordering breaks anywhere."""
        bad = 0
        n_seeds = len(next(iter(self.accuracy.values())))
        for i in range(n_seeds):
            vals = [self.accuracy[m][i] for m in order]
            if any(a < b - 1e-12 for a, b in zip(vals, vals[1:])):
                bad += 1
        return bad


def ablation_experiment(
    spec: SyntheticSpec,
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4),
    modes: tuple[str, ...] = MODES_ORDERED,
    pipeline: PipelineConfig | None = None,
) -> AblationReport:
    """Train one bank per seed, then refit heads under each wiring.

    Projections are shared across modes (the bank does not depend on the
    wiring), so each mode costs one head fit plus one matrix forward.
    """
    report = AblationReport(accuracy={m: [] for m in modes})
    for seed in seeds:
        planted = plant_model(spec, _derived_seed(seed, 11))
        train_r, train_f = synth_samples(planted, spec, _derived_seed(seed, 13))
        eval_r, eval_f = synth_samples(planted, spec, _derived_seed(seed, 17))
        cfg = pipeline or default_pipeline(spec, seed=seed)

        prior = init_prior(cfg.prior, seed=seed)
        prior, _ = train_phase1(prior, train_r, cfg.phase1)

        tr = _projection_matrices(prior, train_r + train_f)
        ev = _projection_matrices(prior, eval_r + eval_f)
        for mode in modes:
            det = init_detector(prior, DetectorConfig(mode=mode), seed=seed)
            heads, _ = fit_heads(
                det.heads, tr[0], _mode_pooled(mode, tr[1], tr[2]), tr[3],
                mode, cfg.phase2,
            )
            logits = _head_logits_np(
                heads, ev[0], _mode_pooled(mode, ev[1], ev[2]), mode,
            )
            verdicts = (logits[:, 0] >= 0.0).astype(int)
            report.accuracy[mode].append(balanced_accuracy(ev[3][:, 0], verdicts))
    return report


@dataclass
class PurityReport:
    pure: list[float] = field(default_factory=list)
    mixed: list[float] = field(default_factory=list)

    def mean_pure(self) -> float:
        return float(np.mean(self.pure))

    def mean_mixed(self) -> float:
        return float(np.mean(self.mixed))


def purity_experiment(
    spec: SyntheticSpec,
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4),
    mix_fraction: float = 0.5,
    pipeline: PipelineConfig | None = None,
) -> PurityReport:
    """Real-only bank diet versus a diet contaminated with generated samples.

    Both diets have the same size; the contaminated one swaps in relabeled
    generated samples for `mix_fraction` of the real ones. Heads are then
    trained identically, so any accuracy gap is attributable to the bank.
    """
    if not (0.0 < mix_fraction <= 1.0):
        raise ContractViolation("mix_fraction must lie in (0, 1]")
    report = PurityReport()
    for seed in seeds:
        planted = plant_model(spec, _derived_seed(seed, 19))
        train_r, train_f = synth_samples(planted, spec, _derived_seed(seed, 23))
        eval_r, eval_f = synth_samples(planted, spec, _derived_seed(seed, 29))
        cfg = pipeline or default_pipeline(spec, seed=seed)

        n_mix = int(round(len(train_r) * mix_fraction))
        pure_diet = train_r
        mixed_diet = train_r[n_mix:] + relabel_as_real(train_f[:n_mix])

        accs = []
        for diet in (pure_diet, mixed_diet):
            prior = init_prior(cfg.prior, seed=seed)
            prior, _ = train_phase1(prior, diet, cfg.phase1)
            det = init_detector(prior, cfg.detector, seed=seed)
            det, _ = train_phase2(det, train_r + train_f, cfg.phase2)
            accs.append(evaluate_detector(det, eval_r + eval_f).balanced_accuracy)
        report.pure.append(accs[0])
        report.mixed.append(accs[1])
    return report


@dataclass
class SweepPoint:
    value: int
    auc: float


def _sweep(spec: SyntheticSpec, seed: int,
           configs: list[tuple[int, PipelineConfig]]) -> list[SweepPoint]:
    """Sensitivity sweeps score the residual channel (AUC of per-image
    reconstruction error), not the trained heads: head accuracy saturates
    long before the bank stops improving, while the residual separation
    tracks how well the bank actually fits the manifold."""
    planted = plant_model(spec, _derived_seed(seed, 31))
    train_r, _ = synth_samples(planted, spec, _derived_seed(seed, 37))
    eval_r, eval_f = synth_samples(planted, spec, _derived_seed(seed, 41))
    points = []
    for value, cfg in configs:
        prior = init_prior(cfg.prior, seed=cfg.seed)
        prior, _ = train_phase1(prior, train_r, cfg.phase1)
        points.append(SweepPoint(value=value, auc=residual_auc(prior, eval_r, eval_f)))
    return points


def prototype_sweep(
    spec: SyntheticSpec,
    values: tuple[int, ...] = (2, 4, 8, 16, 32, 64, 96),
    seed: int = 0,
    top_k: int = 8,
) -> list[SweepPoint]:
    """Bank size sweep at fixed top-k (top-k is capped at the bank size)."""
    configs = [
        (v, default_pipeline(spec, seed=seed, n_prototypes=v, top_k=min(top_k, v)))
        for v in values
    ]
    return _sweep(spec, seed, configs)


def topk_sweep(
    spec: SyntheticSpec,
    values: tuple[int, ...] = (1, 4, 8),
    seed: int = 0,
    n_prototypes: int = 64,
) -> list[SweepPoint]:
    configs = [
        (v, default_pipeline(spec, seed=seed, n_prototypes=n_prototypes, top_k=v))
        for v in values
    ]
    return _sweep(spec, seed, configs)


def peak_value(points: list[SweepPoint]) -> int:
    """Value of the first point attaining the sweep's best AUC."""
    best = max(p.auc for p in points)
    for p in points:
        if p.auc == best:
            return p.value
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# Robustness pairing
# ---------------------------------------------------------------------------


@dataclass
class RobustnessReport:
    clean_accuracy: float
    variant_accuracy: float
    n_pairs: int

    @property
    def drop(self) -> float:
        return self.clean_accuracy - self.variant_accuracy


def pair_by_id(clean: list[Sample],
               variants: list[Sample]) -> list[tuple[Sample, Sample]]:
    """Match corrupted variants to their clean originals by image id."""
    index: dict[str, Sample] = {}
    for s in clean:
        if not s.image_id:
            raise ContractViolation("clean sample without image_id cannot pair")
        if s.image_id in index:
            raise ContractViolation(f"duplicate clean image_id {s.image_id!r}")
        index[s.image_id] = s
    pairs = []
    for v in variants:
        if v.image_id not in index:
            raise ContractViolation(
                f"variant {v.image_id!r} has no clean counterpart"
            )
        c = index[v.image_id]
        if c.label != v.label:
            raise ContractViolation(
                f"variant {v.image_id!r} changed label: corruption must not"
            )
        pairs.append((c, v))
    if not pairs:
        raise ContractViolation("no pairs to evaluate")
    return pairs


def robustness_report(det: Detector, clean: list[Sample],
                      variants: list[Sample]) -> RobustnessReport:
    """Accuracy on originals versus their corrupted twins, same images."""
    pairs = pair_by_id(clean, variants)
    clean_rep = evaluate_detector(det, [c for c, _ in pairs])
    var_rep = evaluate_detector(det, [v for _, v in pairs])
    return RobustnessReport(
        clean_accuracy=clean_rep.balanced_accuracy,
        variant_accuracy=var_rep.balanced_accuracy,
        n_pairs=len(pairs),
    )
