"""Detector head tests: init neutrality, wiring isolation, phase 2 freeze."""

import math

import numpy as np
import pytest

from refdet.detector import (
    Detector,
    DetectorConfig,
    HEAD_NAMES,
    Phase2Config,
    ScoreResult,
    _head_logits_np,
    build_head_logits,
    clamped_bce,
    detector_fingerprint,
    detector_from_tensors,
    detector_to_tensors,
    fit_heads,
    init_detector,
    score,
    train_phase2,
)
from refdet.errors import ContractViolation
from refdet.numerics import F32, F64, Tape, Tensor2, grad_check
from refdet.prior import PriorConfig, fingerprint, init_prior
from refdet.store import Sample


def small_prior(seed=0):
    return init_prior(PriorConfig(n_prototypes=8, feature_dim=4, top_k=2), seed=seed)


def random_heads(det_cfg: DetectorConfig, d: int, seed: int) -> dict:
    """Heads with every layer nonzero, so isolation tests are meaningful."""
    rng = np.random.default_rng(seed)
    de, h = det_cfg.evidence_dim, det_cfg.hidden_dim
    shapes = {
        "per_w1": (2, h), "per_b1": (1, h), "per_w2": (h, de), "per_b2": (1, de),
        "res_w": (d, de), "res_b": (1, de),
        "clf_w1": (2 * de, h), "clf_b1": (1, h), "clf_w2": (h, 1), "clf_b2": (1, 1),
    }
    return {k: Tensor2(rng.standard_normal(s).astype(F32)) for k, s in shapes.items()}


# ---------------------------------------------------------------------------
# Init neutrality and config
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["full", "residual_only", "perplexity_only", "baseline"])
def test_fresh_detector_says_half(mode):
    det = init_detector(small_prior(), DetectorConfig(mode=mode), seed=3)
    rng = np.random.default_rng(4)
    for _ in range(5):
        feats = Tensor2(rng.standard_normal((6, 4)).astype(F32))
        assert score(det, feats).y_pred == 0.5


def test_mode_validation():
    with pytest.raises(ContractViolation):
        DetectorConfig(mode="extra_spicy")


def test_missing_head_tensor_rejected():
    det = init_detector(small_prior())
    heads = dict(det.heads)
    heads.pop("clf_w2")
    with pytest.raises(ContractViolation):
        Detector(prior=det.prior, config=det.config, heads=heads)


# ---------------------------------------------------------------------------
# Clamped BCE oracles
# ---------------------------------------------------------------------------


def test_bce_oracle_values():
    assert clamped_bce(np.array([[0.5]]), np.array([[1.0]])) == pytest.approx(
        math.log(2.0), abs=1e-12
    )
    # confident and wrong: clamp keeps the loss finite at -log(1e-7)
    assert clamped_bce(np.array([[1.0]]), np.array([[0.0]])) == pytest.approx(
        -math.log(1e-7), rel=1e-9
    )
    assert clamped_bce(np.array([[0.0]]), np.array([[0.0]])) == pytest.approx(
        -math.log(1.0 - 1e-7), rel=1e-6
    )


def test_bce_shape_mismatch():
    with pytest.raises(ContractViolation):
        clamped_bce(np.zeros((2, 1)), np.zeros((3, 1)))


# ---------------------------------------------------------------------------
# Wiring isolation across ablation modes
# ---------------------------------------------------------------------------


def _logit(heads, stats, pooled, mode):
    return _head_logits_np(heads, stats.astype(F32), pooled.astype(F32), mode)[0, 0]


@pytest.mark.parametrize(
    "mode,stats_matter,pooled_matter",
    [
        ("full", True, True),
        ("residual_only", False, True),
        ("perplexity_only", True, False),
        ("baseline", False, True),
    ],
)
def test_evidence_isolation(mode, stats_matter, pooled_matter):
    cfg = DetectorConfig(mode=mode)
    heads = random_heads(cfg, d=4, seed=11)
    stats = np.array([[0.5, 0.3]])
    pooled = np.array([[0.1, -0.2, 0.4, 0.0]])
    base = _logit(heads, stats, pooled, mode)
    moved_stats = _logit(heads, stats + 1.0, pooled, mode)
    moved_pooled = _logit(heads, stats, pooled + 1.0, mode)
    assert (moved_stats != base) == stats_matter
    assert (moved_pooled != base) == pooled_matter


def test_graph_logits_match_plain_forward():
    cfg = DetectorConfig()
    heads = random_heads(cfg, d=4, seed=12)
    rng = np.random.default_rng(13)
    stats = rng.standard_normal((5, 2)).astype(F32)
    pooled = rng.standard_normal((5, 4)).astype(F32)
    want = _head_logits_np(heads, stats, pooled, "full")

    tape = Tape()
    nodes = {k: tape.leaf(v) for k, v in heads.items()}
    got = build_head_logits(tape, nodes, stats, pooled, "full")
    np.testing.assert_allclose(got.value, want, atol=1e-6)


def test_head_gradients_check_out():
    rng = np.random.default_rng(14)
    cfg = DetectorConfig(evidence_dim=3, hidden_dim=5)
    heads64 = {k: v.astype(F64) for k, v in random_heads(cfg, d=4, seed=15).items()}
    stats = rng.standard_normal((6, 2))
    pooled = rng.standard_normal((6, 4))
    y = (rng.random((6, 1)) < 0.5).astype(np.float64)
    names = list(HEAD_NAMES)

    def loss_fn(tape, nodes):
        node_map = dict(zip(names, nodes))
        logits = build_head_logits(tape, node_map, stats, pooled, "full")
        return tape.bce_with_logits(logits, y)

    assert grad_check(loss_fn, [heads64[n] for n in names]) < 1e-6


# ---------------------------------------------------------------------------
# Head training
# ---------------------------------------------------------------------------


def test_fit_heads_learns_separable_toy():
    # pooled residual column 0 alone decides the label
    rng = np.random.default_rng(21)
    n = 64
    y = (np.arange(n) % 2).astype(np.float64).reshape(n, 1)
    pooled = rng.standard_normal((n, 4)) * 0.05
    pooled[:, 0] += np.where(y[:, 0] > 0, 1.0, -1.0)
    stats = np.tile(np.array([[0.5, 0.6]]), (n, 1))

    det = init_detector(small_prior(), DetectorConfig(), seed=22)
    cfg = Phase2Config(epochs=200, batch_size=64, lr=1e-2, seed=23)
    heads, report = fit_heads(
        det.heads, stats.astype(F32), pooled.astype(F32),
        y.astype(F32), "full", cfg,
    )
    assert report.train_bce < 0.1
    assert report.epoch_losses[-1] < report.epoch_losses[0]


def test_fit_heads_row_count_mismatch():
    det = init_detector(small_prior())
    with pytest.raises(ContractViolation):
        fit_heads(det.heads, np.zeros((3, 2), dtype=F32),
                  np.zeros((2, 4), dtype=F32), np.zeros((3, 1), dtype=F32),
                  "full", Phase2Config(epochs=1))


def test_train_phase2_freezes_prior_and_needs_both_labels():
    prior = small_prior(seed=31)
    det = init_detector(prior, DetectorConfig(), seed=32)
    rng = np.random.default_rng(33)
    samples = []
    for i in range(16):
        feats = Tensor2(rng.standard_normal((4, 4)).astype(F32))
        samples.append(Sample(features=feats, label=i % 2, image_id=f"img{i}"))

    before = fingerprint(prior)
    trained, report = train_phase2(det, samples, Phase2Config(epochs=5, seed=34))
    assert fingerprint(trained.prior) == before
    assert report.n_steps == 5
    assert detector_fingerprint(trained) != detector_fingerprint(det)

    only_real = [s for s in samples if s.label == 0]
    with pytest.raises(ContractViolation):
        train_phase2(det, only_real, Phase2Config(epochs=1))
    with pytest.raises(ContractViolation):
        train_phase2(det, [], Phase2Config(epochs=1))


def test_phase2_training_is_deterministic():
    prior = small_prior(seed=41)
    det = init_detector(prior, DetectorConfig(), seed=42)
    rng = np.random.default_rng(43)
    samples = [
        Sample(features=Tensor2(rng.standard_normal((4, 4)).astype(F32)),
               label=i % 2, image_id=f"s{i}")
        for i in range(12)
    ]
    a, _ = train_phase2(det, samples, Phase2Config(epochs=8, seed=44))
    b, _ = train_phase2(det, samples, Phase2Config(epochs=8, seed=44))
    assert detector_fingerprint(a) == detector_fingerprint(b)


# ---------------------------------------------------------------------------
# Scoring surface
# ---------------------------------------------------------------------------


def test_score_result_fields():
    det = init_detector(small_prior(), seed=51)
    rng = np.random.default_rng(52)
    feats = Tensor2(rng.standard_normal((16, 4)).astype(F32))
    out = score(det, feats)
    assert isinstance(out, ScoreResult)
    assert 0.0 <= out.y_pred <= 1.0
    assert out.residual_row_norms.shape == (16,)
    assert out.heatmap().shape == (4, 4)
    assert out.is_generated == (out.y_pred >= 0.5)


def test_heatmap_non_square_falls_back_to_strip():
    det = init_detector(small_prior(), seed=53)
    rng = np.random.default_rng(54)
    feats = Tensor2(rng.standard_normal((5, 4)).astype(F32))
    assert score(det, feats).heatmap().shape == (1, 5)


# ---------------------------------------------------------------------------
# Archive round trip
# ---------------------------------------------------------------------------


def test_detector_tensor_round_trip():
    det = init_detector(small_prior(seed=61), DetectorConfig(mode="residual_only"),
                        seed=62)
    cfg, tensors = detector_to_tensors(det)
    back = detector_from_tensors(cfg, tensors)
    assert detector_fingerprint(back) == detector_fingerprint(det)
    rng = np.random.default_rng(63)
    feats = Tensor2(rng.standard_normal((4, 4)).astype(F32))
    assert score(back, feats).y_pred == score(det, feats).y_pred
