from __future__ import annotations

import itertools

import numpy as np
import pytest

from malkit.dataset import NOVEL
from malkit.errors import DimensionError, MalkitError
from malkit.gbm import GBMModel, train
from malkit.metrics import (
    fp_decomposition,
    fp_decomposition_curve,
    macro_recall,
    micro_recall,
    novelty_roc,
    recall_matrix,
    time_inference,
    timing_ratio,
    tpr_at_fpr,
)
from malkit.models import GBMConfig, OSRThreshold
from malkit.osnn import OSNNModel, osnn_ratio_batch
from malkit.osr import OpenSetClassifier, classify_open_batch
from malkit.synthetic import make_synthetic


def test_micro_and_macro_recall_example():
    truth = ["a", "a", "b", "b"]
    pred = ["a", "b", "b", "b"]
    assert micro_recall(pred, truth) == 0.75
    assert macro_recall(pred, truth) == 0.75


def test_macro_ignores_unsupported_classes():
    # 'c' is predicted but never true
    assert macro_recall(["c", "a"], ["a", "a"]) == 0.5
    assert macro_recall(["a", "a"], ["a", "a"]) == 1.0


def test_recall_input_errors():
    with pytest.raises(DimensionError):
        micro_recall(["a"], ["a", "b"])
    with pytest.raises(MalkitError):
        macro_recall([], [])


def test_recall_matrix_rows():
    rm = recall_matrix(["a", NOVEL], ["a", "a"], ["a", "b", NOVEL])
    assert rm.rates[0].tolist() == [0.5, 0.0, 0.5]
    assert rm.zero_support.tolist() == [False, True, True]
    assert rm.rates[1].tolist() == [0.0, 0.0, 0.0]


def test_recall_matrix_identity_and_aggregates():
    rng = np.random.default_rng(0)
    labels = ["a", "b", "c", NOVEL]
    truth = list(rng.choice(labels, size=200))
    assert np.array_equal(recall_matrix(truth, truth, labels).rates, np.eye(4))
    pred = list(rng.choice(labels, size=200))
    rm = recall_matrix(pred, truth, labels)
    np.testing.assert_allclose(rm.rates.sum(axis=1), 1.0, atol=1e-9)
    assert rm.micro() == pytest.approx(micro_recall(pred, truth))
    assert rm.macro() == pytest.approx(macro_recall(pred, truth))


def test_recall_matrix_requires_all_labels():
    with pytest.raises(MalkitError):
        recall_matrix(["a", "z"], ["a", "a"], ["a"])


@pytest.mark.parametrize(
    "novel, known, expected",
    [([0.9, 1.0], [0.1, 0.2], 1.0), ([0.5, 0.9], [0.1, 0.5], 0.875), ([0.3, 0.3], [0.3, 0.3], 0.5)],
)
def test_novelty_roc_examples(novel, known, expected):
    curve = novelty_roc(novel + known, [True] * len(novel) + [False] * len(known))
    assert curve.auc == pytest.approx(expected, abs=1e-12)
    assert (curve.fpr[0], curve.tpr[0]) == (0.0, 0.0)
    assert (curve.fpr[-1], curve.tpr[-1]) == (1.0, 1.0)
    assert (np.diff(curve.fpr) >= 0).all() and (np.diff(curve.tpr) >= 0).all()


def _pair_auc(scores: np.ndarray, novel: np.ndarray) -> float:
    pos, neg = scores[novel], scores[~novel]
    total = 0.0
    for p, n in itertools.product(pos, neg):
        total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def test_novelty_roc_matches_pair_counting():
    rng = np.random.default_rng(1)
    for n in (10, 80, 400):
        scores = np.round(rng.normal(size=n), 1)
        novel = rng.random(n) < 0.4
        novel[0], novel[1] = True, False
        assert novelty_roc(scores, novel).auc == pytest.approx(_pair_auc(scores, novel), abs=1e-12)


def test_auc_invariant_under_increasing_transform():
    rng = np.random.default_rng(2)
    s = rng.normal(size=300)
    y = rng.random(300) < 0.5
    assert novelty_roc(np.exp(s), y).auc == pytest.approx(novelty_roc(s, y).auc, abs=1e-12)


def test_novelty_roc_needs_both_classes():
    with pytest.raises(MalkitError):
        novelty_roc([0.1, 0.2], [True, True])


def test_tpr_at_fpr():
    curve = novelty_roc([0.9, 0.8, 0.7, 0.1], [True, True, False, False])
    assert tpr_at_fpr(curve, 0.0) == 1.0
    curve = novelty_roc([0.9, 0.5, 0.7, 0.1], [True, True, False, False])
    assert tpr_at_fpr(curve, 0.0) == 0.5
    assert tpr_at_fpr(curve, 0.5) == 1.0


def test_fp_decomposition_no_flags():
    fp = fp_decomposition(["a", "b"], ["a", "b"], ["a", "b"])
    assert (fp.fpr_total, fp.fpr_from_correct, fp.fpr_from_misclassified) == (0.0, 0.0, 0.0)


def test_fp_decomposition_misclassified_flag():
    truth = ["a"] * 10
    closed = ["b"] + ["a"] * 9
    open_ = [NOVEL] + ["a"] * 9
    fp = fp_decomposition(closed, open_, truth)
    assert fp.n_known == 10
    assert fp.fpr_total == pytest.approx(0.1)
    assert fp.fpr_from_correct == 0.0
    assert fp.fpr_from_misclassified == pytest.approx(0.1)
    assert fp.adjusted_micro == 1.0


def test_fp_decomposition_ignores_novel_truth():
    fp = fp_decomposition(["a", "a", "b"], [NOVEL, "a", NOVEL], ["a", "a", NOVEL])
    assert fp.n_known == 2
    assert fp.fpr_total == pytest.approx(0.5)
    assert fp.fpr_total == pytest.approx(fp.fpr_from_correct + fp.fpr_from_misclassified)


def test_fp_decomposition_curve_matches_point():
    rng = np.random.default_rng(3)
    truth = list(rng.choice(["a", "b", NOVEL], size=100))
    closed = list(rng.choice(["a", "b"], size=100))
    ml = rng.normal(size=100)
    curve = fp_decomposition_curve(closed, ml, truth)
    assert curve["fpr_total"].is_monotonic_increasing
    tau = float(curve["tau"].iloc[7])
    open_ = [NOVEL if m < tau else c for m, c in zip(ml, closed)]
    point = fp_decomposition(closed, open_, truth)
    row = curve.iloc[7]
    assert row["fpr_from_correct"] == pytest.approx(point.fpr_from_correct)
    assert row["fpr_from_misclassified"] == pytest.approx(point.fpr_from_misclassified)
    assert curve["fpr_total"].iloc[-1] == 1.0


def test_time_inference_reports_per_sample_seconds():
    X = np.zeros((50, 4))
    res = time_inference(lambda Q: Q.sum(), X, repetitions=6, groups=3)
    assert res.n_samples == 50
    assert len(res.group_means) == 3
    assert res.seconds_per_sample >= 0.0
    with pytest.raises(MalkitError):
        time_inference(lambda Q: Q, X, repetitions=0)


def _open_set(model: GBMModel) -> OpenSetClassifier:
    return OpenSetClassifier(
        model, OSRThreshold(tau=0.0, target_fpr=0.0, calibration_size=0, model_hash=model.model_hash)
    )


@pytest.fixture(scope="module")
def bench_model(synthetic) -> GBMModel:
    return train(synthetic, GBMConfig())


@pytest.mark.slow
def test_timing_self_comparison_band(bench_model, synthetic):
    K = _open_set(bench_model)
    X = synthetic.X[:500]
    a = time_inference(lambda Q: classify_open_batch(K, Q), X, 30)
    b = time_inference(lambda Q: classify_open_batch(K, Q), X, 30)
    assert 0.8 <= timing_ratio(a, b) <= 1.25


@pytest.mark.slow
def test_inference_time_linear_in_tree_count(bench_model, synthetic):
    doubled = GBMModel(
        config=bench_model.config.model_copy(update={"rounds": 2 * bench_model.rounds}),
        classes=bench_model.classes,
        base_scores=bench_model.base_scores,
        trees=bench_model.trees + bench_model.trees,
        vocab=bench_model.vocab,
    )
    X = synthetic.X[:1000]
    t100 = time_inference(lambda Q: classify_open_batch(_open_set(bench_model), Q), X, 30)
    t200 = time_inference(lambda Q: classify_open_batch(_open_set(doubled), Q), X, 30)
    assert 1.5 <= timing_ratio(t200, t100) <= 2.5


@pytest.mark.slow
def test_maxlogit_faster_than_osnn_scan(bench_model):
    big = make_synthetic(seed=43, per_family=1000)
    assert big.n == 5000
    osnn = OSNNModel.from_dataset(big)
    K = _open_set(bench_model)
    X = big.X[:500]
    t_max = time_inference(lambda Q: classify_open_batch(K, Q), X, 30)
    t_nn = time_inference(lambda Q: osnn_ratio_batch(osnn, Q), X, 30)
    assert timing_ratio(t_nn, t_max) >= 5.0
