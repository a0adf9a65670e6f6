from __future__ import annotations

import math

import numpy as np
import pytest

import malkit.osr as osr
from malkit.dataset import NOVEL
from malkit.errors import DimensionError, ThresholdError
from malkit.gbm import DecisionTree, GBMModel, train
from malkit.models import GBMConfig, OSRThreshold
from malkit.osr import (
    OpenSetClassifier,
    calibrate,
    calibrate_threshold,
    classify_open,
    classify_open_batch,
    max_logit,
)


def _K(model: GBMModel, tau: float) -> OpenSetClassifier:
    th = OSRThreshold(tau=tau, target_fpr=0.0, calibration_size=1, model_hash=model.model_hash)
    return OpenSetClassifier(model, th)


@pytest.mark.parametrize("z, expected", [([1.0, -1.0], 1.0), ([2.5], 2.5), ([-3.0, -1.0, -2.0], -1.0)])
def test_max_logit(z, expected):
    assert max_logit(np.array(z)) == expected


def test_max_logit_rejects_empty_and_nan():
    with pytest.raises(DimensionError):
        max_logit(np.array([]))
    with pytest.raises(DimensionError):
        max_logit(np.array([1.0, np.nan]))


def test_calibrate_threshold_quantile():
    m = 0.1 * np.arange(1, 101)
    th = calibrate_threshold(m, 0.05)
    assert th.tau == pytest.approx(0.6)
    assert int((m < th.tau).sum()) == 5
    assert th.calibration_size == 100


def test_calibrate_threshold_zero_fpr_is_minimum():
    m = np.array([3.0, 1.0, 2.0])
    assert calibrate_threshold(m, 0.0).tau == 1.0


def test_calibrate_threshold_default_operating_point():
    m = np.random.default_rng(1).normal(size=100)
    assert calibrate_threshold(m, 0.005).tau == m.min()


def test_calibrate_threshold_full_fpr_is_infinite():
    assert math.isinf(calibrate_threshold([1.0, 2.0], 1.0).tau)


def test_calibrate_threshold_errors():
    with pytest.raises(ThresholdError):
        calibrate_threshold([], 0.1)
    with pytest.raises(ThresholdError):
        calibrate_threshold([1.0], 1.5)
    with pytest.raises(ThresholdError):
        calibrate_threshold([1.0], -0.1)


def _brute_force_tau(m: np.ndarray, fpr: float) -> float:
    best = -math.inf
    for cand in [*np.unique(m), math.inf]:
        if (m < cand).sum() / m.size <= fpr:
            best = max(best, cand)
    return best


def test_calibrate_threshold_matches_brute_force_sweep():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        k = int(rng.integers(10, 200))
        # rounded values force ties
        m = np.round(rng.normal(size=k), 1)
        fpr = float(rng.random())
        tau = calibrate_threshold(m, fpr).tau
        assert (m < tau).sum() / k <= fpr
        assert tau == _brute_force_tau(m, fpr)


@pytest.mark.slow
def test_calibration_guarantee_large_multisets():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        k = int(rng.integers(10, 10_001))
        m = rng.normal(size=k)
        fpr = float(rng.random())
        tau = calibrate_threshold(m, fpr).tau
        assert (m < tau).sum() / k <= fpr


def test_calibrate_threshold_is_monotone_in_fpr():
    m = np.random.default_rng(3).normal(size=500)
    taus = [calibrate_threshold(m, f).tau for f in np.linspace(0, 1, 41)]
    assert all(a <= b for a, b in zip(taus, taus[1:]))


def test_classify_open_hand_model(two_class_model):
    K = _K(two_class_model, 0.0)
    label, z, ml = classify_open(K, np.array([1, 0]))
    assert (label, ml) == ("a", 1.0)
    np.testing.assert_allclose(z, [1.0, 0.5])
    # z = [-1, 0.5]: max exactly at a tau of 0.5 stays known
    assert classify_open(_K(two_class_model, 0.5), np.array([0, 0])).label == "b"
    assert classify_open(_K(two_class_model, 0.6), np.array([0, 0])).label == NOVEL


def test_classify_open_symmetric_negative_model(vocab2):
    m = GBMModel(
        config=GBMConfig(rounds=1, learning_rate=1.0),
        classes=("a", "b"),
        base_scores=np.zeros(2),
        trees=(
            DecisionTree.from_nodes(0, [{"feature": 0}, {"leaf": -1.0}, {"leaf": 1.0}]),
            DecisionTree.from_nodes(1, [{"feature": 0}, {"leaf": -1.0}, {"leaf": -1.0}]),
        ),
        vocab=vocab2,
    )
    K = _K(m, 0.0)
    assert classify_open(K, np.array([1, 0])).label == "a"
    assert classify_open(K, np.array([0, 0])).label == NOVEL


def test_degenerate_thresholds(two_class_model):
    X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.uint8)
    never = classify_open_batch(_K(two_class_model, -math.inf), X)
    assert never.labels == never.closed
    always = classify_open_batch(_K(two_class_model, math.inf), X)
    assert always.labels == [NOVEL] * 4


def test_classify_open_calls_decision_values_once(monkeypatch, two_class_model):
    calls = []
    real = osr.decision_values

    def counting(model, p):
        calls.append(1)
        return real(model, p)

    monkeypatch.setattr(osr, "decision_values", counting)
    classify_open(_K(two_class_model, 0.0), np.array([1, 1]))
    assert len(calls) == 1


def test_classify_open_rejects_foreign_threshold(two_class_model):
    th = OSRThreshold(tau=0.0, target_fpr=0.01, calibration_size=10, model_hash="0" * 64)
    with pytest.raises(ThresholdError):
        classify_open(OpenSetClassifier(two_class_model, th), np.array([0, 0]))


def test_batch_agrees_with_single(two_class_model):
    K = _K(two_class_model, 0.7)
    X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.uint8)
    batch = classify_open_batch(K, X)
    assert batch.labels == [classify_open(K, p).label for p in X]


def test_calibrate_on_training_data(small_synthetic):
    model = train(small_synthetic, GBMConfig(rounds=10))
    K = calibrate(model, small_synthetic.X, 0.1)
    assert K.threshold.model_hash == model.model_hash
    assert K.threshold.calibration_source == "training-fold"
    flagged = sum(lb == NOVEL for lb in classify_open_batch(K, small_synthetic.X).labels)
    assert flagged / small_synthetic.n <= 0.1
