"""Reference prior: a learned memory bank of real-image prototypes.

An incoming feature map F (N patch rows, D dims) is reconstructed as a
sparse attention mixture over K prototype rows M. Queries and keys are
single-head bias-free linear maps; each query row attends to its top-k
prototypes only. Real features sit near the prototype manifold, so they
reconstruct well and attention concentrates; generated features drift off
it, leaving a large residual and flatter attention.

The top-k support set is recomputed on every forward pass but treated as a
constant during backward: gradients flow only through selected entries.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .numerics import (
    F32,
    Node,
    Tape,
    Tensor2,
    _masked_row_softmax,
)


@dataclass(frozen=True)
class PriorConfig:
    """Memory bank geometry: K prototypes of dimension D, top-k attention."""

    n_prototypes: int = 64
    feature_dim: int = 32
    top_k: int = 8

    def __post_init__(self) -> None:
        if self.n_prototypes < 1 or self.feature_dim < 1:
            raise ContractViolation("n_prototypes and feature_dim must be >= 1")
        if not (1 <= self.top_k <= self.n_prototypes):
            raise ContractViolation(
                f"top_k must be in [1, {self.n_prototypes}], got {self.top_k}"
            )


@dataclass
class ReferencePrior:
    """Bank M (K x D) plus query/key/value projections (each D x D)."""

    config: PriorConfig
    m: Tensor2
    wq: Tensor2
    wk: Tensor2
    wv: Tensor2

    def __post_init__(self) -> None:
        c = self.config
        if self.m.shape != (c.n_prototypes, c.feature_dim):
            raise ContractViolation(
                f"bank shape {self.m.shape} != ({c.n_prototypes}, {c.feature_dim})"
            )
        d = c.feature_dim
        for name, w in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv)):
            if w.shape != (d, d):
                raise ContractViolation(f"{name} must be {d}x{d}, got {w.shape}")

    def params(self) -> dict[str, Tensor2]:
        return {"m": self.m, "wq": self.wq, "wk": self.wk, "wv": self.wv}


def init_prior(config: PriorConfig, seed: int) -> ReferencePrior:
    """Fresh prior: bank rows ~ N(0, 1/D), identity-like projections.

    Wq and Wk start at D^(1/4) * I so initial attention logits are raw
    feature-prototype dot products (the two D^(1/4) factors cancel the
    1/sqrt(D) in the score scaling); Wv starts at I.
    """
    rng = np.random.default_rng(seed)
    d = config.feature_dim
    m = rng.standard_normal((config.n_prototypes, d)) / math.sqrt(d)
    wqk = (d ** 0.25) * np.eye(d)
    return ReferencePrior(
        config=config,
        m=Tensor2(m.astype(F32)),
        wq=Tensor2(wqk.astype(F32)),
        wk=Tensor2(wqk.astype(F32)),
        wv=Tensor2(np.eye(d, dtype=F32)),
    )


def top_k_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries per row.

    Ties break toward the lowest column index (stable sort on negated
    scores), so selection is deterministic.
    """
    if not (1 <= k <= scores.shape[1]):
        raise ContractViolation(f"k={k} out of range for {scores.shape[1]} columns")
    order = np.argsort(-scores, axis=1, kind="stable")
    mask = np.zeros(scores.shape, dtype=bool)
    rows = np.arange(scores.shape[0])[:, None]
    mask[rows, order[:, :k]] = True
    return mask


def attention_stats(attention: np.ndarray, k: int) -> tuple[float, float]:
    """(s_max, s_ent): mean per-row max and mean per-row entropy.

    Rows are renormalized in float64 first; results are clipped to their
    mathematically valid ranges ([1/k, 1] and [0, ln k]) to absorb
    last-bit rounding.
    """
    a = attention.astype(np.float64)
    a = a / a.sum(axis=1, keepdims=True)
    s_max = float(a.max(axis=1).mean())
    logs = np.zeros_like(a)
    np.log(a, where=a > 0, out=logs)
    s_ent = float((-(a * logs).sum(axis=1)).mean())
    s_max = min(1.0, max(1.0 / k, s_max))
    s_ent = min(math.log(k), max(0.0, s_ent)) if k > 1 else 0.0
    return s_max, s_ent


@dataclass
class ProjectionResult:
    """Reconstruction of one feature map against the bank.

    `attention` is the dense N x K matrix with at most top_k nonzeros per
    row; `residual` is F - F_hat; `s_max`/`s_ent` summarize how peaked the
    attention is (means over rows).
    """

    f_hat: Tensor2
    attention: Tensor2
    residual: Tensor2
    s_max: float
    s_ent: float
    mask: np.ndarray

    def residual_row_norms(self) -> np.ndarray:
        """Per-patch reconstruction error, the raw material for heatmaps."""
        return np.linalg.norm(self.residual.data.astype(np.float64), axis=1)

    def pooled_residual(self) -> np.ndarray:
        """Mean over patch rows of the residual, shape (1, D)."""
        return self.residual.data.mean(axis=0, keepdims=True)


def project(prior: ReferencePrior, feats: Tensor2) -> ProjectionResult:
    """Reconstruct `feats` (N x D) from the bank; pure forward pass."""
    c = prior.config
    if feats.cols != c.feature_dim:
        raise ContractViolation(
            f"feature dim {feats.cols} != prior dim {c.feature_dim}"
        )
    q = feats.data @ prior.wq.data
    keys = prior.m.data @ prior.wk.data
    scores = (q @ keys.T) / math.sqrt(c.feature_dim)
    mask = top_k_mask(scores, c.top_k)
    attn = _masked_row_softmax(scores, mask)
    f_hat = attn @ (prior.m.data @ prior.wv.data)
    s_max, s_ent = attention_stats(attn, c.top_k)
    return ProjectionResult(
        f_hat=Tensor2(f_hat),
        attention=Tensor2(attn),
        residual=Tensor2(feats.data - f_hat),
        s_max=s_max,
        s_ent=s_ent,
        mask=mask,
    )


def build_projection(
    tape: Tape,
    m: Node,
    wq: Node,
    wk: Node,
    wv: Node,
    feats: Node,
    top_k: int,
) -> tuple[Node, Node, np.ndarray]:
    """Differentiable projection: returns (f_hat, attention, mask) nodes.

    The support mask is derived from the live forward scores, then held
    constant for backward.
    """
    d = feats.shape[1]
    q = tape.matmul(feats, wq)
    keys = tape.matmul(m, wk)
    scores = tape.scale(tape.matmul(q, tape.transpose(keys)), 1.0 / math.sqrt(d))
    mask = top_k_mask(scores.value, top_k)
    attn = tape.masked_row_softmax(scores, mask)
    f_hat = tape.matmul(attn, tape.matmul(m, wv))
    return f_hat, attn, mask


def orthogonality_penalty(m: Tensor2) -> float:
    """|| M M^T - I ||_F, unsquared.

    Pushes prototype rows toward orthonormality. When K > D the Gram
    matrix M M^T is rank-deficient, so the penalty has the hard floor
    sqrt(K - D): at least K - D of its eigenvalues are 0 while the
    identity's are 1.
    """
    md = m.data.astype(np.float64)
    gram = md @ md.T
    return float(np.linalg.norm(gram - np.eye(m.rows)))


def build_orthogonality_penalty(tape: Tape, m: Node) -> Node:
    eye = np.eye(m.shape[0], dtype=m.value.dtype)
    gram = tape.matmul(m, tape.transpose(m))
    return tape.frobenius_norm(tape.sub(gram, tape.leaf(eye)))


def prior_to_tensors(prior: ReferencePrior) -> tuple[dict, dict[str, np.ndarray]]:
    """(config dict, tensor dict) ready for the archive writer."""
    c = prior.config
    config = {
        "kind": "reference_prior",
        "n_prototypes": c.n_prototypes,
        "feature_dim": c.feature_dim,
        "top_k": c.top_k,
    }
    return config, {k: v.data for k, v in prior.params().items()}


def prior_from_tensors(config: dict, tensors: dict[str, np.ndarray]) -> ReferencePrior:
    from .errors import UnknownTensor

    if config.get("kind") != "reference_prior":
        raise ContractViolation(f"not a prior archive: kind={config.get('kind')}")
    cfg = PriorConfig(
        n_prototypes=int(config["n_prototypes"]),
        feature_dim=int(config["feature_dim"]),
        top_k=int(config["top_k"]),
    )
    missing = {"m", "wq", "wk", "wv"} - set(tensors)
    if missing:
        raise UnknownTensor(f"prior archive is missing tensors: {sorted(missing)}")
    return ReferencePrior(
        config=cfg,
        m=Tensor2(tensors["m"]), wq=Tensor2(tensors["wq"]),
        wk=Tensor2(tensors["wk"]), wv=Tensor2(tensors["wv"]),
    )


def fingerprint(prior: ReferencePrior) -> str:
    """SHA-256 over config and every parameter byte; detects any drift."""
    h = hashlib.sha256()
    c = prior.config
    h.update(f"{c.n_prototypes},{c.feature_dim},{c.top_k}".encode())
    for name in ("m", "wq", "wk", "wv"):
        t = prior.params()[name]
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.tobytes())
    return h.hexdigest()
