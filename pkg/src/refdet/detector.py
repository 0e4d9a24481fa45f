"""Evidence heads over the frozen reference prior, and the final verdict.

Two small heads read the projection of a feature map against the bank:

  * perplexity head: MLP over [s_max, s_ent], how peaked the attention was
  * residual head: linear map over the mean-pooled reconstruction residual

Their evidence vectors are concatenated and a two-layer classifier emits
P(generated). The prior is strictly frozen here; training touches head
parameters only, and the bank fingerprint is asserted unchanged.

Ablation modes rewire the evidence path:

  * "full": both heads live
  * "residual_only": perplexity evidence zeroed
  * "perplexity_only": residual evidence zeroed
  * "baseline": no reconstruction at all; the linear head reads the
    mean-pooled raw features and perplexity evidence is zeroed
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, UnknownTensor
from .numerics import F32, Node, Tape, Tensor2, _gelu, _sigmoid
from .optim import AdamW, AdamWConfig, cosine_lr
from .prior import (
    ProjectionResult,
    ReferencePrior,
    fingerprint,
    prior_from_tensors,
    prior_to_tensors,
    project,
)
from .store import GENERATED, Sample

MODES = ("full", "residual_only", "perplexity_only", "baseline")

HEAD_NAMES = (
    "per_w1", "per_b1", "per_w2", "per_b2",
    "res_w", "res_b",
    "clf_w1", "clf_b1", "clf_w2", "clf_b2",
)


@dataclass(frozen=True)
class DetectorConfig:
    evidence_dim: int = 8
    hidden_dim: int = 16
    mode: str = "full"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ContractViolation(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.evidence_dim < 1 or self.hidden_dim < 1:
            raise ContractViolation("evidence_dim and hidden_dim must be >= 1")


@dataclass
class Detector:
    prior: ReferencePrior
    config: DetectorConfig
    heads: dict[str, Tensor2]

    def __post_init__(self) -> None:
        missing = set(HEAD_NAMES) - set(self.heads)
        if missing:
            raise ContractViolation(f"missing head tensors: {sorted(missing)}")


def init_detector(
    prior: ReferencePrior,
    config: DetectorConfig = DetectorConfig(),
    seed: int = 0,
) -> Detector:
    """Random hidden layers, zeroed final layer: a fresh detector says 0.5."""
    rng = np.random.default_rng(seed)
    d = prior.config.feature_dim
    de, h = config.evidence_dim, config.hidden_dim

    def glorot(fan_in: int, fan_out: int) -> Tensor2:
        w = rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)
        return Tensor2(w.astype(F32))

    heads = {
        "per_w1": glorot(2, h), "per_b1": Tensor2.zeros(1, h),
        "per_w2": glorot(h, de), "per_b2": Tensor2.zeros(1, de),
        "res_w": glorot(d, de), "res_b": Tensor2.zeros(1, de),
        "clf_w1": glorot(2 * de, h), "clf_b1": Tensor2.zeros(1, h),
        "clf_w2": Tensor2.zeros(h, 1), "clf_b2": Tensor2.zeros(1, 1),
    }
    return Detector(prior=prior, config=config, heads=heads)


def detector_fingerprint(det: Detector) -> str:
    h = hashlib.sha256()
    h.update(fingerprint(det.prior).encode())
    h.update(det.config.mode.encode())
    for name in HEAD_NAMES:
        h.update(name.encode())
        h.update(det.heads[name].tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Forward paths
# ---------------------------------------------------------------------------


def detector_inputs(det: Detector, feats: Tensor2) -> tuple[np.ndarray, np.ndarray, ProjectionResult]:
    """(stats row 1x2, pooled row 1xD, projection) for one feature map."""
    res = project(det.prior, feats)
    stats = np.array([[res.s_max, res.s_ent]], dtype=F32)
    if det.config.mode == "baseline":
        pooled = feats.data.mean(axis=0, keepdims=True).astype(F32)
    else:
        pooled = res.pooled_residual().astype(F32)
    return stats, pooled, res


def _head_logits_np(heads: dict[str, Tensor2], stats: np.ndarray,
                    pooled: np.ndarray, mode: str) -> np.ndarray:
    """Plain forward pass: (B, 1) logits."""
    b = stats.shape[0]
    de = heads["per_w2"].cols
    if mode in ("full", "perplexity_only"):
        hp = _gelu(stats @ heads["per_w1"].data + heads["per_b1"].data)
        v_per = hp @ heads["per_w2"].data + heads["per_b2"].data
    else:
        v_per = np.zeros((b, de), dtype=stats.dtype)
    if mode == "perplexity_only":
        v_res = np.zeros((b, de), dtype=stats.dtype)
    else:
        v_res = pooled @ heads["res_w"].data + heads["res_b"].data
    cat = np.concatenate([v_per, v_res], axis=1)
    hc = _gelu(cat @ heads["clf_w1"].data + heads["clf_b1"].data)
    return hc @ heads["clf_w2"].data + heads["clf_b2"].data


def build_head_logits(tape: Tape, nodes: dict[str, Node], stats: np.ndarray,
                      pooled: np.ndarray, mode: str) -> Node:
    """Differentiable twin of _head_logits_np over head parameter nodes."""
    b = stats.shape[0]
    de = nodes["per_w2"].shape[1]
    zeros = np.zeros((b, de), dtype=stats.dtype)
    if mode in ("full", "perplexity_only"):
        s = tape.leaf(Tensor2(stats))
        hp = tape.gelu(tape.add_bias(tape.matmul(s, nodes["per_w1"]), nodes["per_b1"]))
        v_per = tape.add_bias(tape.matmul(hp, nodes["per_w2"]), nodes["per_b2"])
    else:
        v_per = tape.leaf(Tensor2(zeros))
    if mode == "perplexity_only":
        v_res = tape.leaf(Tensor2(zeros))
    else:
        p = tape.leaf(Tensor2(pooled))
        v_res = tape.add_bias(tape.matmul(p, nodes["res_w"]), nodes["res_b"])
    cat = tape.concat_cols(v_per, v_res)
    hc = tape.gelu(tape.add_bias(tape.matmul(cat, nodes["clf_w1"]), nodes["clf_b1"]))
    return tape.add_bias(tape.matmul(hc, nodes["clf_w2"]), nodes["clf_b2"])


@dataclass
class ScoreResult:
    """Verdict for one image: P(generated) plus the evidence behind it."""

    y_pred: float
    s_max: float
    s_ent: float
    residual_row_norms: np.ndarray
    is_generated: bool

    def heatmap(self) -> np.ndarray:
        """Row norms reshaped to the patch grid when N is a perfect square."""
        n = self.residual_row_norms.size
        side = math.isqrt(n)
        if side * side == n:
            return self.residual_row_norms.reshape(side, side)
        return self.residual_row_norms.reshape(1, n)


def score(det: Detector, feats: Tensor2) -> ScoreResult:
    stats, pooled, res = detector_inputs(det, feats)
    logit = _head_logits_np(det.heads, stats, pooled, det.config.mode)
    y = float(_sigmoid(logit.astype(np.float64))[0, 0])
    return ScoreResult(
        y_pred=y,
        s_max=res.s_max,
        s_ent=res.s_ent,
        residual_row_norms=res.residual_row_norms(),
        is_generated=y >= 0.5,
    )


def clamped_bce(probs: np.ndarray, labels: np.ndarray,
                clamp: float = 1e-7) -> float:
    """Mean binary cross-entropy over probabilities, clamped away from {0,1}."""
    p = np.clip(np.asarray(probs, dtype=np.float64), clamp, 1.0 - clamp)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ContractViolation(f"probs {p.shape} vs labels {y.shape}")
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())


# ---------------------------------------------------------------------------
# Phase 2 training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Phase2Config:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-2
    weight_decay: float = 0.0
    lr_floor_frac: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractViolation("epochs must be >= 0, batch_size >= 1")


@dataclass
class Phase2Report:
    epoch_losses: list[float] = field(default_factory=list)
    n_steps: int = 0
    train_bce: float = math.nan


def fit_heads(
    heads: dict[str, Tensor2],
    stats: np.ndarray,
    pooled: np.ndarray,
    labels: np.ndarray,
    mode: str,
    config: Phase2Config,
) -> tuple[dict[str, Tensor2], Phase2Report]:
    """Train head parameters on precomputed inputs with logit BCE."""
    n = stats.shape[0]
    if pooled.shape[0] != n or labels.shape != (n, 1):
        raise ContractViolation("stats, pooled and labels row counts differ")
    rng = np.random.default_rng(config.seed)
    params = {k: v.data.copy() for k, v in heads.items()}
    opt = AdamW(AdamWConfig(lr=config.lr, weight_decay=config.weight_decay))
    n_batches = math.ceil(n / config.batch_size)
    total_steps = max(1, config.epochs * n_batches)
    report = Phase2Report()
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            tape = Tape()
            nodes = {
                k: tape.leaf(Tensor2(params[k]), requires_grad=True)
                for k in HEAD_NAMES
            }
            logits = build_head_logits(tape, nodes, stats[idx], pooled[idx], mode)
            loss = tape.bce_with_logits(logits, labels[idx])
            tape.backward(loss)
            grads = {k: nodes[k].grad for k in HEAD_NAMES}
            lr_t = cosine_lr(step, total_steps, config.lr, config.lr_floor_frac)
            params = opt.step(params, grads, lr=lr_t)
            step += 1
            losses.append(float(loss.value[0, 0]))
        report.epoch_losses.append(float(np.mean(losses)))
    report.n_steps = step
    out = {k: Tensor2(v) for k, v in params.items()}
    final_logits = _head_logits_np(
        {k: out[k] for k in HEAD_NAMES}, stats, pooled, mode
    )
    report.train_bce = clamped_bce(
        _sigmoid(final_logits.astype(np.float64)), labels.astype(np.float64)
    )
    return out, report


def prepare_inputs(det: Detector, samples: list[Sample]
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project every sample once; projections are constants for phase 2."""
    stats_rows, pooled_rows, label_rows = [], [], []
    for s in samples:
        st, po, _ = detector_inputs(det, s.features)
        stats_rows.append(st)
        pooled_rows.append(po)
        label_rows.append([1.0 if s.label == GENERATED else 0.0])
    return (
        np.concatenate(stats_rows, axis=0),
        np.concatenate(pooled_rows, axis=0),
        np.array(label_rows, dtype=F32),
    )


def train_phase2(
    det: Detector,
    samples: list[Sample],
    config: Phase2Config,
) -> tuple[Detector, Phase2Report]:
    """Fit the evidence heads; the prior is frozen and verified unchanged."""
    if not samples:
        raise ContractViolation("no samples to train on")
    labels = {s.label for s in samples}
    if len(labels) < 2:
        raise ContractViolation("phase 2 needs both real and generated samples")

    bank_before = fingerprint(det.prior)
    stats, pooled, y = prepare_inputs(det, samples)
    heads, report = fit_heads(det.heads, stats, pooled, y, det.config.mode, config)
    if fingerprint(det.prior) != bank_before:
        raise ContractViolation("reference prior changed during phase 2")
    return Detector(prior=det.prior, config=det.config, heads=heads), report


# ---------------------------------------------------------------------------
# Archive glue
# ---------------------------------------------------------------------------


def detector_to_tensors(det: Detector) -> tuple[dict, dict[str, np.ndarray]]:
    prior_cfg, prior_tensors = prior_to_tensors(det.prior)
    config = {
        "kind": "detector",
        "prior": prior_cfg,
        "evidence_dim": det.config.evidence_dim,
        "hidden_dim": det.config.hidden_dim,
        "mode": det.config.mode,
    }
    tensors = {f"prior.{k}": v for k, v in prior_tensors.items()}
    tensors.update({f"head.{k}": v.data for k, v in det.heads.items()})
    return config, tensors


def detector_from_tensors(config: dict, tensors: dict[str, np.ndarray]) -> Detector:
    if config.get("kind") != "detector":
        raise ContractViolation(f"not a detector archive: kind={config.get('kind')}")
    prior = prior_from_tensors(
        config["prior"],
        {k[len("prior."):]: v for k, v in tensors.items() if k.startswith("prior.")},
    )
    heads = {}
    for name in HEAD_NAMES:
        key = f"head.{name}"
        if key not in tensors:
            raise UnknownTensor(f"detector archive is missing {key}")
        heads[name] = Tensor2(tensors[key])
    cfg = DetectorConfig(
        evidence_dim=int(config["evidence_dim"]),
        hidden_dim=int(config["hidden_dim"]),
        mode=config["mode"],
    )
    return Detector(prior=prior, config=cfg, heads=heads)
