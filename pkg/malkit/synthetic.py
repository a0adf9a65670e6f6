"""Deterministic synthetic permission datasets for desk-scale checks and benchmarks."""

from __future__ import annotations

import numpy as np

from malkit.dataset import Dataset
from malkit.errors import DatasetError
from malkit.permissions import SYSTEM_PREFIX, PermissionVocabulary


def synthetic_vocabulary(P: int) -> PermissionVocabulary:
    return PermissionVocabulary(tuple(f"{SYSTEM_PREFIX}SYNTH_{j:03d}" for j in range(P)))


def make_synthetic(
    seed: int = 42,
    families: int = 5,
    per_family: int = 200,
    P: int = 50,
    exclusive: int = 3,
    noise: float = 0.1,
) -> Dataset:
    """Each family owns ``exclusive`` permissions that every one of its samples requests;
    every other bit is flipped independently with probability ``noise``.

    Family ``i`` owns permissions ``i*exclusive .. (i+1)*exclusive - 1``; the
    remaining permissions carry noise only.
    """
    if families < 1 or per_family < 1:
        raise DatasetError("need at least one family with at least one sample")
    if families * exclusive > P:
        raise DatasetError(f"{families} families x {exclusive} exclusive permissions do not fit in P={P}")
    if not 0.0 <= noise <= 1.0:
        raise DatasetError(f"noise must lie in [0, 1], got {noise}")
    rng = np.random.default_rng(seed)
    n = families * per_family
    X = np.zeros((n, P), dtype=np.uint8)
    labels: list[str] = []
    for i in range(families):
        rows = slice(i * per_family, (i + 1) * per_family)
        X[rows, i * exclusive : (i + 1) * exclusive] = 1
        labels += [f"family{i}"] * per_family
    owned = X.copy()
    X ^= (rng.random((n, P)) < noise).astype(np.uint8)
    X |= owned
    ids = tuple(f"syn{j:05d}" for j in range(n))
    return Dataset(X, tuple(labels), ids, synthetic_vocabulary(P))
