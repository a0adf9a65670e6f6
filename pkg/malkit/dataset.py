"""Labeled permission datasets: loading, family grouping and the two experimental splits."""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal, Sequence

import numpy as np
import pandas as pd

from malkit.errors import DatasetError, SplitError
from malkit.permissions import (
    PermissionVocabulary,
    build_vocabulary,
    encode,
    filter_system_permissions,
    parse_feature_lines,
)

log = logging.getLogger(__name__)

NOVEL = "NOVEL"
OTHERS = "others"
LABEL_FILE_NAMES = ("sha256_family.csv", "labels.csv")

DatasetFormat = Literal["drebin-dir", "csv", "cache"]


@dataclass(frozen=True, eq=False)
class LabeledSample:
    vector: np.ndarray
    label: str
    id: str


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray  # (n, P) uint8
    labels: tuple[str, ...]
    ids: tuple[str, ...]
    vocab: PermissionVocabulary
    _counts: Counter = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.uint8)
        if X.ndim != 2 or X.shape != (len(self.labels), self.vocab.P):
            raise DatasetError(
                f"sample matrix shape {X.shape} does not match {len(self.labels)} labels x P={self.vocab.P}"
            )
        if len(self.ids) != len(self.labels):
            raise DatasetError("ids and labels differ in length")
        if NOVEL in self.labels:
            raise DatasetError(f"{NOVEL!r} is reserved and cannot label a training sample")
        if X.size and X.max() > 1:
            raise DatasetError("sample vectors must be binary")
        X.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "_counts", Counter(self.labels))

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def P(self) -> int:
        return self.vocab.P

    @property
    def families(self) -> list[str]:
        """Every Known label present, ``others`` included."""
        return sorted(self._counts)

    @property
    def known_families(self) -> list[str]:
        """Families a classifier may be trained on (``others`` excluded)."""
        return sorted(f for f in self._counts if f != OTHERS)

    def family_counts(self) -> dict[str, int]:
        return dict(sorted(self._counts.items()))

    def __len__(self) -> int:
        return self.n

    def __iter__(self) -> Iterator[LabeledSample]:
        for i in range(self.n):
            yield self.sample(i)

    def sample(self, i: int) -> LabeledSample:
        return LabeledSample(self.X[i], self.labels[i], self.ids[i])

    def label_array(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=object)

    def subset(self, indices: Sequence[int] | np.ndarray) -> Dataset:
        ix = np.asarray(indices, dtype=np.intp)
        return Dataset(
            self.X[ix],
            tuple(self.labels[i] for i in ix),
            tuple(self.ids[i] for i in ix),
            self.vocab,
        )

    def relabel(self, mapping: dict[str, str]) -> Dataset:
        return Dataset(self.X, tuple(mapping.get(lb, lb) for lb in self.labels), self.ids, self.vocab)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.vocab.fingerprint().encode("ascii"))
        for sid, lb in zip(self.ids, self.labels):
            h.update(f"{sid}\x1f{lb}\x1e".encode("utf-8"))
        h.update(np.packbits(self.X, axis=1).tobytes())
        h.update(str(self.X.shape).encode("ascii"))
        return h.hexdigest()


def from_permission_sets(
    permission_sets: Sequence[Sequence[str]],
    labels: Sequence[str],
    ids: Sequence[str],
    vocab: PermissionVocabulary | None = None,
) -> Dataset:
    vocab = vocab if vocab is not None else build_vocabulary(permission_sets)
    X = np.zeros((len(permission_sets), vocab.P), dtype=np.uint8)
    for i, names in enumerate(permission_sets):
        X[i] = encode(names, vocab).vector
    return Dataset(X, tuple(labels), tuple(ids), vocab)


def project(d: Dataset, vocab: PermissionVocabulary) -> Dataset:
    """Re-encode ``d`` against ``vocab``; permissions absent from ``vocab`` are dropped."""
    if d.vocab.names == vocab.names:
        return d
    X = np.zeros((d.n, vocab.P), dtype=np.uint8)
    src = np.array([d.vocab.index.get(name, -1) for name in vocab.names], dtype=np.intp)
    present = src >= 0
    if present.any():
        X[:, present] = d.X[:, src[present]]
    dropped = d.P - int(present.sum())
    if dropped:
        log.debug("projection dropped %d permission(s) unknown to the target vocabulary", dropped)
    return Dataset(X, d.labels, d.ids, vocab)


def _check_label(label: str, path: Path, line: int) -> str:
    lb = label.strip()
    if not lb:
        raise DatasetError("empty family label", path, line)
    if lb == NOVEL:
        raise DatasetError(f"family label {NOVEL!r} is reserved", path, line)
    return lb


def _read_csv(path: Path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except FileNotFoundError as e:
        raise DatasetError("file not found", path) from e
    except (OSError, UnicodeDecodeError) as e:
        raise DatasetError(f"cannot read file: {e}", path) from e
    except pd.errors.EmptyDataError as e:
        raise DatasetError("empty CSV file", path) from e
    except pd.errors.ParserError as e:
        raise DatasetError(f"malformed CSV: {e}", path) from e


def _find_labels_file(root: Path) -> Path:
    for name in LABEL_FILE_NAMES:
        cand = root.parent / name
        if cand.exists():
            return cand
    raise DatasetError(f"no label CSV next to the feature directory (looked for {', '.join(LABEL_FILE_NAMES)})", root)


def _read_label_map(path: Path) -> dict[str, str]:
    df = _read_csv(path)
    if df.shape[1] < 2:
        raise DatasetError("label CSV needs two columns: id,family", path, 1)
    out: dict[str, str] = {}
    for row_no, (sid, fam) in enumerate(zip(df.iloc[:, 0], df.iloc[:, 1]), start=2):
        sid = str(sid).strip()
        if not sid:
            raise DatasetError("empty sample id", path, row_no)
        fam = _check_label(str(fam), path, row_no)
        if sid in out and out[sid] != fam:
            raise DatasetError(f"sample {sid} labeled both {out[sid]!r} and {fam!r}", path, row_no)
        out[sid] = fam
    return out


def _feature_files(root: Path) -> list[Path]:
    if not root.is_dir():
        raise DatasetError("not a directory", root)
    return sorted(p for p in root.iterdir() if p.is_file() and not p.name.startswith("."))


def _read_feature_file(fp: Path) -> list[str]:
    try:
        text = fp.read_text(encoding="utf-8", errors="replace")
    except OSError as e:
        raise DatasetError(f"cannot read file: {e.strerror}", fp) from e
    return filter_system_permissions(parse_feature_lines(text, fp))


def _load_drebin_dir(root: Path, labels_path: Path | None, skip_unlabeled: bool) -> Dataset:
    files = _feature_files(root)
    label_map = _read_label_map(labels_path or _find_labels_file(root))

    sets: list[list[str]] = []
    labels: list[str] = []
    ids: list[str] = []
    skipped = 0
    for fp in files:
        sid = fp.stem
        fam = label_map.get(sid) or label_map.get(fp.name)
        if fam is None:
            if skip_unlabeled:
                skipped += 1
                continue
            raise DatasetError(f"sample id {sid!r} has no family label", fp)
        sets.append(_read_feature_file(fp))
        labels.append(fam)
        ids.append(sid)
    if skipped:
        log.warning("skipped %d unlabeled feature file(s) in %s", skipped, root)
    return from_permission_sets(sets, labels, ids)


def _parse_bit(value: str, path: Path, line: int, column: str) -> bool:
    v = value.strip()
    if v in {"1", "1.0", "true", "True"}:
        return True
    if v in {"0", "0.0", "", "false", "False"}:
        return False
    raise DatasetError(f"non-binary value {value!r} in column {column!r}", path, line)


def _csv_rows(path: Path) -> tuple[list[list[str]], list[str] | None, list[str]]:
    """Permission sets, raw labels (None without a label column) and ids of a dataset CSV."""
    df = _read_csv(path)
    cols = [str(c).strip() for c in df.columns]
    df.columns = cols
    id_col = "id" if "id" in cols else None
    rest = [c for c in cols if c not in {"label", "id"}]
    perm_cols = None if rest == ["permissions"] else filter_system_permissions(rest)

    sets: list[list[str]] = []
    labels: list[str] | None = [] if "label" in cols else None
    ids: list[str] = []
    for row_no, row in enumerate(df.itertuples(index=False), start=2):
        rec = dict(zip(cols, row))
        if perm_cols is None:
            names = [n.strip() for n in str(rec["permissions"]).split(";") if n.strip()]
            sets.append(filter_system_permissions(names))
        else:
            sets.append([c for c in perm_cols if _parse_bit(str(rec[c]), path, row_no, c)])
        if labels is not None:
            labels.append(str(rec["label"]))
        ids.append(str(rec[id_col]).strip() if id_col else f"row{row_no}")
    return sets, labels, ids


def _load_csv(path: Path) -> Dataset:
    sets, raw_labels, ids = _csv_rows(path)
    if raw_labels is None:
        raise DatasetError("CSV header must contain a 'label' column", path, 1)
    labels = [_check_label(lb, path, row_no) for row_no, lb in enumerate(raw_labels, start=2)]
    return from_permission_sets(sets, labels, ids)


def load_dataset(
    path: str | Path,
    format: DatasetFormat = "csv",
    *,
    labels_path: str | Path | None = None,
    skip_unlabeled: bool = False,
) -> Dataset:
    p = Path(path)
    if not p.exists():
        raise DatasetError("path does not exist", p)
    if format == "drebin-dir":
        d = _load_drebin_dir(p, Path(labels_path) if labels_path else None, skip_unlabeled)
    elif format == "csv":
        d = _load_csv(p)
    elif format == "cache":
        from malkit.dataset_store import load_dataset_cache

        d = load_dataset_cache(p)
    else:
        raise DatasetError(f"unsupported dataset format: {format}", p)
    log.info("loaded %s: n=%d P=%d families=%d", p, d.n, d.P, len(d.families))
    return d


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """Samples to classify, encoded against a model's vocabulary, in input order."""

    ids: tuple[str, ...]
    X: np.ndarray


def load_samples(path: str | Path, format: DatasetFormat, vocab: PermissionVocabulary) -> SampleBatch:
    """Like ``load_dataset`` but for samples of unknown family.

    Labels are neither required nor read: every feature file of a Drebin
    directory and every CSV row becomes one sample, and permissions outside
    ``vocab`` are ignored.
    """
    p = Path(path)
    if not p.exists():
        raise DatasetError("path does not exist", p)
    if format == "cache":
        from malkit.dataset_store import load_dataset_cache

        d = project(load_dataset_cache(p), vocab)
        return SampleBatch(d.ids, d.X)
    if format == "drebin-dir":
        files = _feature_files(p)
        sets = [_read_feature_file(fp) for fp in files]
        ids = [fp.stem for fp in files]
    elif format == "csv":
        sets, _, ids = _csv_rows(p)
    else:
        raise DatasetError(f"unsupported dataset format: {format}", p)
    X = np.zeros((len(sets), vocab.P), dtype=np.uint8)
    ignored = 0
    for i, names in enumerate(sets):
        enc = encode(names, vocab)
        X[i] = enc.vector
        ignored += enc.ignored
    if ignored:
        log.warning("%s: %d permission(s) unknown to the vocabulary were ignored", p, ignored)
    return SampleBatch(tuple(ids), X)


def group_rare_families(d: Dataset, min_count: int) -> Dataset:
    if min_count < 1:
        raise DatasetError(f"min_count must be >= 1, got {min_count}")
    counts = d.family_counts()
    rare = {f: OTHERS for f, c in counts.items() if f != OTHERS and c < min_count}
    if rare:
        log.info("grouped %d family(ies) with < %d samples into %r", len(rare), min_count, OTHERS)
    return d.relabel(rare) if rare else d


def top_k_families(d: Dataset, k: int) -> Dataset:
    counts = {f: c for f, c in d.family_counts().items() if f != OTHERS}
    if k < 1 or k > len(counts):
        raise DatasetError(f"top_k must be between 1 and {len(counts)}, got {k}")
    ranked = sorted(counts.items(), key=lambda x: (-x[1], x[0]))
    keep = {f for f, _ in ranked[:k]}
    mapping = {f: OTHERS for f in counts if f not in keep}
    return d.relabel(mapping) if mapping else d


@dataclass(frozen=True, eq=False)
class Fold:
    train: np.ndarray  # TR
    test: np.ndarray  # TS, known-family part
    novel: np.ndarray  # TS, Novel part (replicated across folds)
    held_out: str | None = None
    calibration: Literal["training-fold", "external-TT"] = "training-fold"  # TT

    @property
    def test_all(self) -> np.ndarray:
        return np.concatenate([self.test, self.novel])

    def test_truth(self, d: Dataset) -> list[str]:
        return [d.labels[i] for i in self.test] + [NOVEL] * len(self.novel)


@dataclass(frozen=True, eq=False)
class SplitPlan:
    kind: Literal["kfold", "loco"]
    k: int
    seed: int
    folds: tuple[Fold, ...]

    def __len__(self) -> int:
        return len(self.folds)

    def __iter__(self) -> Iterator[Fold]:
        return iter(self.folds)


def _stratified_assign(d: Dataset, families: Sequence[str], k: int, rng: np.random.Generator) -> list[np.ndarray]:
    labels = d.label_array()
    buckets: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    for fam in sorted(families):
        idx = np.flatnonzero(labels == fam)
        if len(idx) < k:
            raise SplitError(
                f"family {fam!r} has {len(idx)} samples, fewer than k={k}; "
                f"run group_rare_families with min_count >= {k} first"
            )
        for j, i in enumerate(rng.permutation(idx)):
            buckets[(offset + j) % k].append(int(i))
        offset = (offset + len(idx)) % k
    return [np.array(sorted(b), dtype=np.intp) for b in buckets]


def _folds_for(d: Dataset, families: Sequence[str], k: int, seed: int, novel: np.ndarray, held_out: str | None) -> list[Fold]:
    if k < 2:
        raise SplitError(f"k must be >= 2, got {k}")
    tests = _stratified_assign(d, families, k, np.random.default_rng(seed))
    eligible = np.concatenate(tests) if tests else np.array([], dtype=np.intp)
    eligible.sort()
    folds = []
    for test in tests:
        train = np.setdiff1d(eligible, test, assume_unique=True)
        folds.append(Fold(train=train, test=test, novel=novel, held_out=held_out))
    return folds


def stratified_kfold(d: Dataset, k: int, seed: int) -> SplitPlan:
    """k folds over the known families; every ``others`` sample joins every test fold as Novel."""
    novel = np.flatnonzero(d.label_array() == OTHERS).astype(np.intp)
    folds = _folds_for(d, d.known_families, k, seed, novel, None)
    return SplitPlan("kfold", k, seed, tuple(folds))


def leave_one_class_out(d: Dataset, k: int = 10, seed: int = 0) -> SplitPlan:
    """One iteration per known family, each a stratified k-fold over the remaining families."""
    known = d.known_families
    if len(known) < 2:
        raise SplitError(f"leave-one-class-out needs at least 2 known families, got {len(known)}")
    labels = d.label_array()
    folds: list[Fold] = []
    for fam in known:
        retained = [f for f in known if f != fam]
        novel = np.flatnonzero(labels == fam).astype(np.intp)
        folds.extend(_folds_for(d, retained, k, seed, novel, fam))
    return SplitPlan("loco", k, seed, tuple(folds))
