"""Phase 1: fit the memory bank and projections to real images only.

The objective per feature map is the mean squared reconstruction error
(normalized by N*D so maps of different sizes weigh equally) plus
lambda_ortho times the unsquared orthogonality penalty on the bank. Only
real-labeled samples are legal input: prototypes must describe the real
manifold, and a single generated sample in the bank's diet silently
degrades detection later, so mixed input is a hard error rather than a
warning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .numerics import F32, Tape, Tensor2
from .optim import AdamW, AdamWConfig, cosine_lr
from .prior import (
    ReferencePrior,
    build_orthogonality_penalty,
    build_projection,
    orthogonality_penalty,
    project,
)
from .store import REAL, Sample

PARAM_NAMES = ("m", "wq", "wk", "wv")


@dataclass(frozen=True)
class Phase1Config:
    epochs: int = 5
    batch_size: int = 8
    lr: float = 1e-2
    lambda_ortho: float = 0.01
    weight_decay: float = 0.01
    lr_floor_frac: float = 0.01
    holdout_frac: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractViolation("epochs must be >= 0, batch_size >= 1")
        if self.lr <= 0.0 or self.weight_decay < 0.0:
            raise ContractViolation("lr must be > 0, weight_decay >= 0")
        if self.lambda_ortho < 0 or not (0.0 <= self.holdout_frac < 1.0):
            raise ContractViolation("bad lambda_ortho or holdout_frac")


@dataclass
class Phase1Report:
    """Training trace: per-epoch mean loss plus holdout error before/after."""

    epoch_losses: list[float] = field(default_factory=list)
    holdout_before: float = math.nan
    holdout_after: float = math.nan
    final_penalty: float = math.nan
    n_steps: int = 0
    n_train: int = 0
    n_holdout: int = 0


def reconstruction_loss(prior: ReferencePrior, samples: list[Sample]) -> float:
    """Mean over samples of mean squared residual entry."""
    if not samples:
        raise ContractViolation("reconstruction_loss needs at least one sample")
    total = 0.0
    for s in samples:
        res = project(prior, s.features)
        r = res.residual.data.astype(np.float64)
        total += float((r * r).mean())
    return total / len(samples)


def _check_purity(samples: list[Sample]) -> None:
    bad = [s.image_id or "<unnamed>" for s in samples if s.label != REAL]
    if bad:
        raise ContractViolation(
            f"bank training requires real-labeled samples only; "
            f"{len(bad)} offender(s), first: {bad[0]}"
        )


def train_phase1(
    prior: ReferencePrior,
    samples: list[Sample],
    config: Phase1Config,
) -> tuple[ReferencePrior, Phase1Report]:
    """Train bank + projections; returns a new prior, input left untouched."""
    _check_purity(samples)
    if not samples:
        raise ContractViolation("no samples to train on")
    for s in samples:
        if s.features.cols != prior.config.feature_dim:
            raise ContractViolation(
                f"sample {s.image_id!r} has dim {s.features.cols}, "
                f"prior expects {prior.config.feature_dim}"
            )

    rng = np.random.default_rng(config.seed)
    n_hold = int(round(len(samples) * config.holdout_frac))
    order = rng.permutation(len(samples))
    holdout = [samples[i] for i in order[:n_hold]]
    train = [samples[i] for i in order[n_hold:]]
    if not train:
        raise ContractViolation("holdout fraction leaves no training samples")

    report = Phase1Report(n_train=len(train), n_holdout=len(holdout))
    if holdout:
        report.holdout_before = reconstruction_loss(prior, holdout)

    params = {k: v.data.astype(F32).copy() for k, v in prior.params().items()}
    opt = AdamW(AdamWConfig(lr=config.lr, weight_decay=config.weight_decay))
    n_batches = math.ceil(len(train) / config.batch_size)
    total_steps = config.epochs * n_batches
    step = 0

    for _ in range(config.epochs):
        epoch_order = rng.permutation(len(train))
        batch_losses = []
        for b in range(n_batches):
            idx = epoch_order[b * config.batch_size:(b + 1) * config.batch_size]
            batch = [train[i] for i in idx]

            tape = Tape()
            nodes = {
                name: tape.leaf(Tensor2(params[name]), requires_grad=True)
                for name in PARAM_NAMES
            }
            recon_terms = []
            for s in batch:
                feats = tape.leaf(s.features)
                f_hat, _, _ = build_projection(
                    tape, nodes["m"], nodes["wq"], nodes["wk"], nodes["wv"],
                    feats, prior.config.top_k,
                )
                recon_terms.append(
                    tape.mean_all(tape.square(tape.sub(feats, f_hat)))
                )
            recon = recon_terms[0]
            for term in recon_terms[1:]:
                recon = tape.add(recon, term)
            recon = tape.scale(recon, 1.0 / len(batch))
            penalty = build_orthogonality_penalty(tape, nodes["m"])
            loss = tape.add(recon, tape.scale(penalty, config.lambda_ortho))
            tape.backward(loss)

            grads = {name: nodes[name].grad for name in PARAM_NAMES}
            lr_t = cosine_lr(step, total_steps, config.lr, config.lr_floor_frac)
            params = opt.step(params, grads, lr=lr_t)
            step += 1
            batch_losses.append(float(loss.value[0, 0]))
        report.epoch_losses.append(float(np.mean(batch_losses)))

    trained = ReferencePrior(
        config=prior.config,
        m=Tensor2(params["m"]), wq=Tensor2(params["wq"]),
        wk=Tensor2(params["wk"]), wv=Tensor2(params["wv"]),
    )
    report.n_steps = step
    if holdout:
        report.holdout_after = reconstruction_loss(trained, holdout)
    report.final_penalty = orthogonality_penalty(trained.m)
    return trained, report
