"""MaxLogit open-set recognition on top of the boosted-tree logits.

A sample is Novel when its largest logit falls strictly below the threshold
tau; tau is the FPR-quantile of max-logits observed on known-family samples.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Literal, NamedTuple, Sequence

import numpy as np

from malkit.dataset import NOVEL
from malkit.errors import DimensionError, ThresholdError
from malkit.gbm import GBMModel, decision_values, decision_values_batch
from malkit.models import OSRThreshold

log = logging.getLogger(__name__)

CalibrationSource = Literal["training-fold", "external-TT"]


def max_logit(z: np.ndarray) -> float:
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise DimensionError("logit vector is empty")
    if not np.isfinite(z).all():
        raise DimensionError("logit vector has non-finite entries")
    return float(z.max())


def allowed_below(fpr: float, k: int) -> int:
    """Largest c with c / k <= fpr, i.e. floor(fpr * k) without float rounding surprises."""
    c = min(k, math.floor(fpr * k))
    while c < k and (c + 1) / k <= fpr:
        c += 1
    while c > 0 and c / k > fpr:
        c -= 1
    return c


def calibrate_threshold(
    max_logits: Sequence[float] | np.ndarray,
    fpr: float,
    *,
    source: CalibrationSource = "training-fold",
    model_hash: str | None = None,
) -> OSRThreshold:
    """tau = the (c+1)-th smallest calibration max-logit, c = floor(fpr * k); +inf when c >= k.

    At most ``fpr * k`` calibration values lie strictly below tau.
    """
    if not 0.0 <= fpr <= 1.0:
        raise ThresholdError(f"fpr must lie in [0, 1], got {fpr}")
    m = np.sort(np.asarray(max_logits, dtype=np.float64).ravel())
    k = int(m.size)
    if k == 0:
        raise ThresholdError("cannot calibrate on an empty set of max-logits")
    if np.isnan(m).any():
        raise ThresholdError("calibration max-logits contain NaN")
    c = allowed_below(fpr, k)
    tau = float(m[c]) if c < k else math.inf
    log.debug("calibrated tau=%r from k=%d values at fpr=%g (c=%d)", tau, k, fpr, c)
    return OSRThreshold(
        tau=tau, target_fpr=fpr, calibration_size=k, calibration_source=source, model_hash=model_hash
    )


class OpenSetDecision(NamedTuple):
    label: str
    z: np.ndarray
    max_logit: float


@dataclass(frozen=True, eq=False)
class OpenSetClassifier:
    model: GBMModel
    threshold: OSRThreshold

    @property
    def tau(self) -> float:
        return self.threshold.tau


def calibrate(
    model: GBMModel,
    X_calibration: np.ndarray,
    fpr: float,
    *,
    source: CalibrationSource = "training-fold",
) -> OpenSetClassifier:
    z = decision_values_batch(model, X_calibration)
    th = calibrate_threshold(z.max(axis=1), fpr, source=source, model_hash=model.model_hash)
    return OpenSetClassifier(model, th)


def _check_pairing(K: OpenSetClassifier) -> None:
    if K.threshold.model_hash != K.model.model_hash:
        raise ThresholdError(
            "threshold was calibrated against a different model "
            f"({K.threshold.model_hash} != {K.model.model_hash})"
        )


def classify_open(K: OpenSetClassifier, p: np.ndarray) -> OpenSetDecision:
    _check_pairing(K)
    z = decision_values(K.model, p)
    top = int(np.argmax(z))
    ml = float(z[top])
    label = NOVEL if ml < K.threshold.tau else K.model.classes[top]
    return OpenSetDecision(label, z, ml)


class OpenSetBatch(NamedTuple):
    labels: list[str]  # K
    closed: list[str]  # C
    max_logits: np.ndarray


def classify_open_batch(K: OpenSetClassifier, X: np.ndarray) -> OpenSetBatch:
    _check_pairing(K)
    z = decision_values_batch(K.model, X)
    top = np.argmax(z, axis=1)
    ml = z[np.arange(z.shape[0]), top]
    closed = [K.model.classes[i] for i in top]
    labels = [NOVEL if v < K.threshold.tau else c for v, c in zip(ml, closed)]
    return OpenSetBatch(labels, closed, ml)
