"""Open-set nearest neighbour baseline (distance-ratio rule).

For a query p: t is its nearest training sample, u the nearest training
sample of a different family than t, and R = d(p, t) / d(p, u). Ties are
broken by training index. Queries are a linear scan with a full sort of the
distances, which is the cost profile the MaxLogit comparison is made against.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Literal, NamedTuple

import numpy as np

from malkit.dataset import NOVEL, Dataset
from malkit.errors import DimensionError, OSNNError
from malkit.osr import calibrate_threshold

log = logging.getLogger(__name__)

Distance = Literal["hamming", "euclidean"]
RatioRule = Literal["original", "inverted"]

_QUERY_CHUNK = 256


@dataclass(frozen=True, eq=False)
class OSNNModel:
    X: np.ndarray  # (n, P) uint8
    labels: tuple[str, ...]
    distance: Distance = "hamming"
    ratio_threshold: float = 0.5
    unknown_rule: RatioRule = "original"
    _codes: np.ndarray = field(init=False, repr=False)
    _Xf: np.ndarray = field(init=False, repr=False)
    _pop: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.uint8)
        if X.ndim != 2 or X.shape[0] == 0:
            raise OSNNError("OSNN needs a non-empty 2-D training matrix")
        if X.shape[0] != len(self.labels):
            raise DimensionError(f"{X.shape[0]} training vectors but {len(self.labels)} labels")
        if not 0.0 <= self.ratio_threshold <= 1.0:
            raise OSNNError(f"ratio threshold must lie in [0, 1], got {self.ratio_threshold}")
        if self.distance not in ("hamming", "euclidean"):
            raise OSNNError(f"unknown distance {self.distance!r}")
        if self.unknown_rule not in ("original", "inverted"):
            raise OSNNError(f"unknown ratio rule {self.unknown_rule!r}")
        names, codes = np.unique(np.asarray(self.labels, dtype=object), return_inverse=True)
        if len(names) < 2:
            raise OSNNError("OSNN needs training samples from at least two families")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "_codes", codes.astype(np.int64))
        object.__setattr__(self, "_Xf", X.astype(np.float64))
        object.__setattr__(self, "_pop", X.sum(axis=1, dtype=np.float64))

    @classmethod
    def from_dataset(cls, d: Dataset, **kwargs) -> OSNNModel:
        return cls(d.X, d.labels, **kwargs)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def P(self) -> int:
        return self.X.shape[1]

    def with_threshold(self, T: float) -> OSNNModel:
        return dataclasses.replace(self, ratio_threshold=T)

    def hamming(self, Q: np.ndarray) -> np.ndarray:
        """(q, n) Hamming distances, equal to squared euclidean ones on binary vectors."""
        Qf = np.asarray(Q, dtype=np.float64)
        # |a xor b| = |a| + |b| - 2 a.b on binary vectors
        D = Qf.sum(axis=1)[:, None] + self._pop[None, :] - 2.0 * (Qf @ self._Xf.T)
        np.maximum(D, 0.0, out=D)
        return D


class OSNNBatch(NamedTuple):
    labels: list[str]  # nearest-neighbour family, or NOVEL after classification
    ratios: np.ndarray


def _ratios_for(m: OSNNModel, D: np.ndarray, self_index: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    if self_index is not None:
        D[np.arange(D.shape[0]), self_index] = np.inf
    order = np.argsort(D, axis=1, kind="stable")
    if self_index is not None:
        order = order[:, :-1]
    codes = m._codes[order]
    other = codes != codes[:, :1]
    if not other.any(axis=1).all():
        raise OSNNError("no training sample of a second family is available for this query")
    rows = np.arange(D.shape[0])
    t = order[:, 0]
    u = order[rows, np.argmax(other, axis=1)]
    dt = D[rows, t]
    du = D[rows, u]
    with np.errstate(divide="ignore", invalid="ignore"):
        R = np.where(du == 0.0, 1.0, dt / np.where(du == 0.0, 1.0, du))
    return t, R


def osnn_ratio_batch(m: OSNNModel, X: np.ndarray, *, leave_one_out: bool = False) -> OSNNBatch:
    """Nearest-family labels and ratios for every row of ``X``.

    With ``leave_one_out`` the rows of ``X`` must be the training matrix
    itself; each row is then matched with its own entry excluded.
    """
    X = np.asarray(X, dtype=np.uint8)
    if X.ndim != 2 or X.shape[1] != m.P:
        raise DimensionError(f"query shape {X.shape} does not match training P={m.P}")
    if leave_one_out and X.shape[0] != m.n:
        raise OSNNError("leave-one-out queries must be the training matrix")
    nearest = np.empty(X.shape[0], dtype=np.int64)
    ratios = np.empty(X.shape[0], dtype=np.float64)
    for lo in range(0, X.shape[0], _QUERY_CHUNK):
        hi = min(lo + _QUERY_CHUNK, X.shape[0])
        self_index = np.arange(lo, hi) if leave_one_out else None
        t, R = _ratios_for(m, m.hamming(X[lo:hi]), self_index)
        nearest[lo:hi] = t
        ratios[lo:hi] = R
    # euclidean ratio = sqrt(hamming ratio), rooted last so hamming ties stay tied
    if m.distance == "euclidean":
        np.sqrt(ratios, out=ratios)
    return OSNNBatch([m.labels[i] for i in nearest], ratios)


def osnn_ratio(m: OSNNModel, p: np.ndarray) -> tuple[str, float]:
    p = np.asarray(p, dtype=np.uint8)
    if p.ndim != 1:
        raise DimensionError(f"expected a 1-D permission vector, got shape {p.shape}")
    res = osnn_ratio_batch(m, p[None, :])
    return res.labels[0], float(res.ratios[0])


def is_unknown(m: OSNNModel, R: float | np.ndarray) -> bool | np.ndarray:
    if m.unknown_rule == "original":
        return R > m.ratio_threshold
    return R < m.ratio_threshold


def novelty_scores(m: OSNNModel, ratios: np.ndarray) -> np.ndarray:
    """Higher means more novel under the model's rule."""
    return ratios if m.unknown_rule == "original" else -ratios


def osnn_classify(m: OSNNModel, p: np.ndarray) -> str:
    label, R = osnn_ratio(m, p)
    return NOVEL if is_unknown(m, R) else label


def osnn_classify_batch(m: OSNNModel, X: np.ndarray) -> OSNNBatch:
    """Open-set labels (``NOVEL`` where rejected) with the ratios behind them."""
    res = osnn_ratio_batch(m, X)
    unknown = is_unknown(m, res.ratios)
    labels = [NOVEL if u else lb for lb, u in zip(res.labels, unknown)]
    return OSNNBatch(labels, res.ratios)


def osnn_calibrate(
    m: OSNNModel,
    calibration: np.ndarray,
    fpr: float,
    *,
    leave_one_out: bool = False,
) -> float:
    """Ratio threshold T letting at most ``fpr`` of the calibration samples be rejected."""
    R = osnn_ratio_batch(m, calibration, leave_one_out=leave_one_out).ratios
    if m.unknown_rule == "original":
        # rejected iff R > T, i.e. -R < -T
        tau = calibrate_threshold(-R, fpr).tau
        T = 0.0 if math.isinf(tau) else -tau
    else:
        tau = calibrate_threshold(R, fpr).tau
        T = 1.0 if math.isinf(tau) else tau
    T = min(max(T, 0.0), 1.0) + 0.0  # no negative zero
    log.debug("OSNN threshold T=%r from %d calibration ratios (fpr=%g)", T, R.size, fpr)
    return T
