"""Multiclass gradient-boosted decision trees over binary permission vectors.

One regression tree per class per round is fit to the multinomial-deviance
pseudo-residuals; leaves carry the (L-1)/L Newton step. The per-class sums of
leaf values are the raw decision values (logits) the open-set module reads.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from malkit.dataset import NOVEL, OTHERS, Dataset
from malkit.errors import DimensionError, TrainingError
from malkit.models import GBMConfig
from malkit.permissions import PermissionVocabulary
from malkit.settings import settings

log = logging.getLogger(__name__)

LEAF = -1
LEAF_CLIP = 4.0
_MIN_GAIN = 1e-12
# Upper bound on (samples x trees) routed per chunk in batch inference.
_ROUTE_CHUNK = 2_000_000

LogitVector = np.ndarray  # 1-D float64, aligned with GBMModel.classes


@dataclass(frozen=True, eq=False)
class DecisionTree:
    class_index: int
    feature: np.ndarray  # int32; LEAF marks a leaf
    child: np.ndarray  # (nodes, 2) int32: successor for p[f] == 0 / p[f] == 1
    value: np.ndarray  # float64; meaningful on leaves only

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    def depth(self) -> int:
        best = 0
        stack = [(0, 0)]
        while stack:
            node, d = stack.pop()
            if self.feature[node] == LEAF:
                best = max(best, d)
            else:
                stack.append((int(self.child[node, 0]), d + 1))
                stack.append((int(self.child[node, 1]), d + 1))
        return best

    def leaf_for(self, p: np.ndarray) -> int:
        node = 0
        while self.feature[node] != LEAF:
            node = int(self.child[node, int(p[self.feature[node]])])
        return node

    def to_nodes(self) -> list[dict[str, float | int]]:
        # Node ids are assigned in preorder at build time, so array order is preorder.
        return [
            {"leaf": float(self.value[i])} if self.feature[i] == LEAF else {"feature": int(self.feature[i])}
            for i in range(self.n_nodes)
        ]

    @classmethod
    def from_nodes(cls, class_index: int, nodes: Sequence[dict[str, Any]]) -> DecisionTree:
        n = len(nodes)
        if n == 0:
            raise ValueError("tree has no nodes")
        feature = np.full(n, LEAF, dtype=np.int32)
        child = np.full((n, 2), LEAF, dtype=np.int32)
        value = np.zeros(n, dtype=np.float64)

        def walk(pos: int) -> int:
            if pos >= n:
                raise ValueError("truncated preorder node list")
            node = nodes[pos]
            if "leaf" in node:
                value[pos] = float(node["leaf"])
                return pos + 1
            if "feature" not in node:
                raise ValueError(f"node {pos} is neither a leaf nor a split")
            feature[pos] = int(node["feature"])
            if feature[pos] < 0:
                raise ValueError(f"node {pos} has negative feature index")
            child[pos, 0] = pos + 1
            right = walk(pos + 1)
            child[pos, 1] = right
            return walk(right)

        if walk(0) != n:
            raise ValueError("preorder node list has trailing nodes")
        return cls(class_index, feature, child, value)


def _leaf_value(r: np.ndarray, n_classes: int) -> float:
    num = float(r.sum())
    a = np.abs(r)
    den = float((a * (1.0 - a)).sum())
    scale = (n_classes - 1) / n_classes
    if den == 0.0:
        return 0.0 if num == 0.0 else float(np.copysign(LEAF_CLIP, num))
    return float(np.clip(scale * num / den, -LEAF_CLIP, LEAF_CLIP))


def _best_split(X: np.ndarray, r: np.ndarray, min_leaf: int) -> tuple[int, float]:
    n = r.shape[0]
    s = r.sum()
    n1 = X.sum(axis=0, dtype=np.int64)
    n0 = n - n1
    s1 = np.add.reduce(X * r[:, None], axis=0)
    s0 = s - s1
    valid = (n1 >= min_leaf) & (n0 >= min_leaf)
    if not valid.any():
        return LEAF, 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = np.where(valid, s1 * s1 / n1 + s0 * s0 / n0 - s * s / n, -np.inf)
    f = int(np.argmax(gain))
    return f, float(gain[f])


def _fit_tree(
    X: np.ndarray, r: np.ndarray, class_index: int, n_classes: int, cfg: GBMConfig
) -> tuple[DecisionTree, np.ndarray]:
    """Fit one regression tree on residuals ``r``; returns it with each sample's leaf value."""
    feature: list[int] = []
    children: list[list[int]] = []
    values: list[float] = []
    fitted = np.zeros(r.shape[0], dtype=np.float64)

    def grow(idx: np.ndarray, depth: int) -> int:
        node = len(feature)
        feature.append(LEAF)
        children.append([LEAF, LEAF])
        values.append(0.0)

        f = LEAF
        if depth < cfg.max_depth and idx.shape[0] >= 2 * cfg.min_leaf:
            f, gain = _best_split(X[idx], r[idx], cfg.min_leaf)
            if gain <= _MIN_GAIN:
                f = LEAF
        if f == LEAF:
            v = _leaf_value(r[idx], n_classes)
            values[node] = v
            fitted[idx] = v
            return node

        feature[node] = f
        on = X[idx, f] == 1
        children[node][0] = grow(idx[~on], depth + 1)
        children[node][1] = grow(idx[on], depth + 1)
        return node

    grow(np.arange(r.shape[0], dtype=np.intp), 0)
    tree = DecisionTree(
        class_index,
        np.asarray(feature, dtype=np.int32),
        np.asarray(children, dtype=np.int32).reshape(-1, 2),
        np.asarray(values, dtype=np.float64),
    )
    return tree, fitted


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-shift; accepts a single logit vector or a (n, L) matrix."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _deviance(F: np.ndarray, y: np.ndarray) -> float:
    m = F.max(axis=1)
    lse = m + np.log(np.exp(F - m[:, None]).sum(axis=1))
    return float((lse - F[np.arange(F.shape[0]), y]).mean())


@dataclass(frozen=True, eq=False)
class GBMModel:
    config: GBMConfig
    classes: tuple[str, ...]
    base_scores: np.ndarray
    trees: tuple[DecisionTree, ...]  # round-major, then class
    vocab: PermissionVocabulary
    train_deviance: tuple[float, ...] = ()
    _routing: dict[str, np.ndarray] = field(init=False, repr=False, compare=False)
    _hash: list[str] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        L = len(self.classes)
        if list(self.classes) != sorted(self.classes):
            raise TrainingError("model classes must be sorted lexicographically")
        if len(self.trees) % max(L, 1) != 0:
            raise TrainingError(f"{len(self.trees)} trees is not a whole number of rounds for {L} classes")
        base = np.asarray(self.base_scores, dtype=np.float64)
        if base.shape != (L,):
            raise TrainingError(f"expected {L} base scores, got {base.shape}")
        for j, t in enumerate(self.trees):
            if t.class_index != j % L:
                raise TrainingError(f"tree {j} has class {t.class_index}, expected {j % L}")
            internal = t.feature[t.feature != LEAF]
            if internal.size and int(internal.max()) >= self.vocab.P:
                raise TrainingError(f"tree {j} splits on feature {int(internal.max())} >= P={self.vocab.P}")
        object.__setattr__(self, "base_scores", base)
        object.__setattr__(self, "_routing", self._compile())
        object.__setattr__(self, "_hash", [])

    def _compile(self) -> dict[str, np.ndarray]:
        T = len(self.trees)
        width = max((t.n_nodes for t in self.trees), default=1)
        feat = np.full((T, width), LEAF, dtype=np.int32)
        child = np.zeros((T, width, 2), dtype=np.int32)
        value = np.zeros((T, width), dtype=np.float64)
        for j, t in enumerate(self.trees):
            k = t.n_nodes
            feat[j, :k] = t.feature
            child[j, :k] = t.child
            value[j, :k] = t.value
        depth = max((t.depth() for t in self.trees), default=0)
        return {"feature": feat, "child": child, "value": value, "depth": np.array(depth)}

    @property
    def rounds(self) -> int:
        return len(self.trees) // len(self.classes) if self.classes else 0

    @property
    def learning_rate(self) -> float:
        return self.config.learning_rate

    @property
    def P(self) -> int:
        return self.vocab.P

    @property
    def vocab_fingerprint(self) -> str:
        return self.vocab.fingerprint()

    def to_record(self) -> dict[str, Any]:
        """The hashed part of the model file."""
        return {
            "config": self.config.model_dump(),
            "classes": list(self.classes),
            "base_scores": [float(b) for b in self.base_scores],
            "vocab": list(self.vocab.names),
            "trees": [{"class": t.class_index, "nodes": t.to_nodes()} for t in self.trees],
        }

    @property
    def model_hash(self) -> str:
        if not self._hash:
            canonical = json.dumps(self.to_record(), sort_keys=True, separators=(",", ":"))
            self._hash.append(hashlib.sha256(canonical.encode("utf-8")).hexdigest())
        return self._hash[0]

    def route(self, X: np.ndarray) -> np.ndarray:
        """Leaf value reached in every tree for every row of ``X``: shape (n, trees)."""
        r = self._routing
        feat, child, value = r["feature"], r["child"], r["value"]
        T = feat.shape[0]
        n = X.shape[0]
        out = np.zeros((n, T), dtype=np.float64)
        if T == 0 or n == 0:
            return out
        tix = np.arange(T)[None, :]
        step = max(1, _ROUTE_CHUNK // T)
        for lo in range(0, n, step):
            Xc = X[lo : lo + step]
            rows = np.arange(Xc.shape[0])[:, None]
            node = np.zeros((Xc.shape[0], T), dtype=np.int32)
            for _ in range(int(r["depth"])):
                f = feat[tix, node]
                internal = f != LEAF
                if not internal.any():
                    break
                bit = Xc[rows, np.where(internal, f, 0)]
                node = np.where(internal, child[tix, node, bit], node)
            out[lo : lo + step] = value[tix, node]
        return out


def _check_dims(m: GBMModel, X: np.ndarray) -> None:
    if X.shape[-1] != m.P:
        raise DimensionError(f"vector length {X.shape[-1]} does not match model P={m.P}")


def decision_values_batch(m: GBMModel, X: np.ndarray) -> np.ndarray:
    """Logits for every row of ``X``: base_scores + eta * per-class sum of leaf values."""
    X = np.asarray(X, dtype=np.uint8)
    if X.ndim != 2:
        raise DimensionError(f"expected a 2-D sample matrix, got shape {X.shape}")
    _check_dims(m, X)
    L = len(m.classes)
    leaves = m.route(X)
    if leaves.shape[1] == 0:
        return np.tile(m.base_scores, (X.shape[0], 1))
    per_class = leaves.reshape(X.shape[0], m.rounds, L).sum(axis=1)
    return m.base_scores + m.learning_rate * per_class


def decision_values(m: GBMModel, p: np.ndarray) -> LogitVector:
    p = np.asarray(p, dtype=np.uint8)
    if p.ndim != 1:
        raise DimensionError(f"expected a 1-D permission vector, got shape {p.shape}")
    return decision_values_batch(m, p[None, :])[0]


def predict_closed(m: GBMModel, p: np.ndarray) -> str:
    # classes are sorted, so argmax's first-max rule is the lexicographic tie-break
    return m.classes[int(np.argmax(decision_values(m, p)))]


def predict_closed_batch(m: GBMModel, X: np.ndarray) -> list[str]:
    z = decision_values_batch(m, X)
    return [m.classes[i] for i in np.argmax(z, axis=1)]


def train(d: Dataset, cfg: GBMConfig | None = None, *, threads: int | None = None) -> GBMModel:
    cfg = cfg or GBMConfig()
    if any(lb in (OTHERS, NOVEL) for lb in d.labels):
        raise TrainingError(f"training data must hold known families only (found {OTHERS!r} or {NOVEL!r})")
    classes = tuple(sorted(set(d.labels)))
    if len(classes) < 2:
        raise TrainingError(f"need at least 2 classes to train, got {len(classes)}")
    X = np.asarray(d.X, dtype=np.uint8)
    if X.ndim != 2 or X.shape[1] != d.P:
        raise TrainingError(f"inconsistent vector lengths: matrix {X.shape}, P={d.P}")

    L = len(classes)
    n = X.shape[0]
    cix = {c: i for i, c in enumerate(classes)}
    y = np.array([cix[lb] for lb in d.labels], dtype=np.intp)
    Y = np.zeros((n, L), dtype=np.float64)
    Y[np.arange(n), y] = 1.0

    base = np.zeros(L, dtype=np.float64)
    F = np.tile(base, (n, 1))
    deviance = [_deviance(F, y)]
    trees: list[DecisionTree] = []
    workers = max(1, min(threads or settings.threads, L))

    with ThreadPoolExecutor(max_workers=workers) as pool:
        for rnd in range(cfg.rounds):
            Pm = softmax(F)
            R = Y - Pm
            fits = list(pool.map(lambda c: _fit_tree(X, R[:, c].copy(), c, L, cfg), range(L)))
            for c, (tree, fitted) in enumerate(fits):
                trees.append(tree)
                F[:, c] += cfg.learning_rate * fitted
            deviance.append(_deviance(F, y))
            log.debug("round %d/%d deviance=%.6f", rnd + 1, cfg.rounds, deviance[-1])

    log.info("trained %d rounds x %d classes on n=%d P=%d", cfg.rounds, L, n, d.P)
    return GBMModel(cfg, classes, base, tuple(trees), d.vocab, tuple(deviance))

