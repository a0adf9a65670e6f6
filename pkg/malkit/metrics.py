"""Evaluation quantities: recall, recall matrices, novelty ROC, false-alarm decomposition, timing."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score, auc, confusion_matrix, recall_score, roc_curve

from malkit.dataset import NOVEL
from malkit.errors import DimensionError, MalkitError

log = logging.getLogger(__name__)


def _aligned(pred: Sequence[str], truth: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    if len(pred) != len(truth):
        raise DimensionError(f"{len(pred)} predictions for {len(truth)} ground-truth labels")
    if len(truth) == 0:
        raise MalkitError("cannot score an empty prediction set")
    return np.asarray(pred, dtype=object), np.asarray(truth, dtype=object)


def micro_recall(pred: Sequence[str], truth: Sequence[str]) -> float:
    p, t = _aligned(pred, truth)
    return float(accuracy_score(t, p))


def macro_recall(pred: Sequence[str], truth: Sequence[str]) -> float:
    """Unweighted mean of per-class recall; classes absent from ``truth`` do not count."""
    p, t = _aligned(pred, truth)
    supported = sorted(set(t.tolist()))
    return float(recall_score(t, p, labels=supported, average="macro", zero_division=0))


@dataclass(frozen=True, eq=False)
class RecallMatrix:
    labels: tuple[str, ...]
    counts: np.ndarray  # (L, L) int, rows = truth
    rates: np.ndarray  # row-normalized
    zero_support: np.ndarray  # (L,) bool

    def micro(self) -> float:
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else 0.0

    def macro(self) -> float:
        diag = np.diag(self.rates)[~self.zero_support]
        return float(diag.mean()) if diag.size else 0.0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rates, index=list(self.labels), columns=list(self.labels))

    def to_record(self) -> dict[str, Any]:
        return {
            "labels": list(self.labels),
            "counts": self.counts.tolist(),
            "rates": self.rates.tolist(),
            "zero_support": [lb for lb, z in zip(self.labels, self.zero_support) if z],
        }


def recall_matrix(pred: Sequence[str], truth: Sequence[str], labels: Sequence[str]) -> RecallMatrix:
    p, t = _aligned(pred, truth)
    labels = tuple(labels)
    missing = (set(p.tolist()) | set(t.tolist())) - set(labels)
    if missing:
        raise MalkitError(f"labels missing from the recall matrix axis: {sorted(missing)}")
    counts = confusion_matrix(t, p, labels=list(labels))
    support = counts.sum(axis=1)
    zero = support == 0
    rates = np.zeros(counts.shape, dtype=np.float64)
    rates[~zero] = counts[~zero] / support[~zero, None]
    return RecallMatrix(labels, counts, rates, zero)


@dataclass(frozen=True, eq=False)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"threshold": self.thresholds, "fpr": self.fpr, "tpr": self.tpr})


def novelty_roc(scores: Sequence[float] | np.ndarray, is_novel: Sequence[bool] | np.ndarray) -> RocCurve:
    """ROC with Novel as the positive class; higher scores mean more novel.

    The area is the trapezoid over every distinct score, which equals the
    Mann-Whitney statistic with ties counted one half.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(is_novel, dtype=bool)
    if s.shape != y.shape:
        raise DimensionError(f"{s.size} scores for {y.size} novelty flags")
    if y.all() or not y.any():
        raise MalkitError("novelty ROC needs both novel and known samples")
    fpr, tpr, thresholds = roc_curve(y, s, drop_intermediate=False)
    return RocCurve(fpr, tpr, thresholds, float(auc(fpr, tpr)))


def tpr_at_fpr(curve: RocCurve, target: float) -> float:
    """Best detection rate reachable while the false-alarm rate stays within ``target``."""
    ok = curve.fpr <= target
    return float(curve.tpr[ok].max()) if ok.any() else 0.0


@dataclass(frozen=True)
class FPDecomposition:
    n_known: int
    fpr_total: float
    fpr_from_correct: float
    fpr_from_misclassified: float
    adjusted_micro: float
    adjusted_macro: float


def fp_decomposition(
    closed_pred: Sequence[str], open_pred: Sequence[str], truth: Sequence[str]
) -> FPDecomposition:
    """Split false alarms on known samples by whether the closed-set model had them right.

    The adjusted recalls count a known sample flagged Novel as acceptable when
    the closed-set prediction for it was wrong anyway.
    """
    c, t = _aligned(closed_pred, truth)
    o, _ = _aligned(open_pred, truth)
    known = t != NOVEL
    flagged = known & (o == NOVEL)
    correct = c == t
    n_known = int(known.sum())
    from_correct = int((flagged & correct).sum())
    from_mis = int((flagged & ~correct).sum())
    adjusted = np.where(flagged & ~correct, t, o)

    def rate(count: int) -> float:
        return count / n_known if n_known else 0.0

    return FPDecomposition(
        n_known=n_known,
        fpr_total=rate(from_correct + from_mis),
        fpr_from_correct=rate(from_correct),
        fpr_from_misclassified=rate(from_mis),
        adjusted_micro=micro_recall(adjusted, t),
        adjusted_macro=macro_recall(adjusted, t),
    )


def fp_decomposition_curve(
    closed_pred: Sequence[str], max_logits: Sequence[float] | np.ndarray, truth: Sequence[str]
) -> pd.DataFrame:
    """False-alarm split at every candidate tau (each distinct known-sample max-logit, then +inf)."""
    c, t = _aligned(closed_pred, truth)
    ml = np.asarray(max_logits, dtype=np.float64)
    if ml.shape != t.shape:
        raise DimensionError(f"{ml.size} max-logits for {t.size} labels")
    known = t != NOVEL
    if not known.any():
        raise MalkitError("false-alarm curve needs known samples")
    n = int(known.sum())
    good = np.sort(ml[known & (c == t)])
    bad = np.sort(ml[known & (c != t)])
    taus = np.append(np.unique(ml[known]), np.inf)
    # a sample is flagged when its max-logit is strictly below tau
    n_good = np.searchsorted(good, taus, side="left")
    n_bad = np.searchsorted(bad, taus, side="left")
    return pd.DataFrame(
        {
            "tau": taus,
            "fpr_total": (n_good + n_bad) / n,
            "fpr_from_correct": n_good / n,
            "fpr_from_misclassified": n_bad / n,
        }
    )


@dataclass(frozen=True)
class TimingResult:
    seconds_per_sample: float
    n_samples: int
    repetitions: int
    group_means: tuple[float, ...]


def time_inference(
    classify: Callable[[np.ndarray], Any],
    samples: np.ndarray,
    repetitions: int = 30,
    *,
    groups: int = 5,
) -> TimingResult:
    """Median-of-means wall-clock seconds per sample for a batch classifier.

    One untimed warm-up pass runs first. Each repetition classifies the whole
    batch; repetitions are split into ``groups`` consecutive groups and the
    median of the group means is reported.
    """
    if repetitions < 1:
        raise MalkitError("repetitions must be >= 1")
    n = len(samples)
    if n == 0:
        raise MalkitError("cannot time inference on zero samples")
    classify(samples)
    per_rep = np.empty(repetitions, dtype=np.float64)
    for i in range(repetitions):
        start = time.perf_counter()
        classify(samples)
        per_rep[i] = (time.perf_counter() - start) / n
    means = tuple(float(g.mean()) for g in np.array_split(per_rep, min(groups, repetitions)))
    result = TimingResult(float(np.median(means)), n, repetitions, means)
    log.debug("timed %d samples x %d repetitions: %.3g s/sample", n, repetitions, result.seconds_per_sample)
    return result


def timing_ratio(slow: TimingResult, fast: TimingResult) -> float:
    return slow.seconds_per_sample / fast.seconds_per_sample
