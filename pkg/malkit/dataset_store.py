from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from malkit.dataset import Dataset
from malkit.errors import DatasetError, SchemaVersionError
from malkit.models import DatasetCacheFile, SampleRecord
from malkit.permissions import PermissionVocabulary
from malkit.settings import settings


def check_schema_version(found: str, path: str | Path) -> None:
    expected_major = settings.schema_version.split(".", 1)[0]
    found_major = str(found).split(".", 1)[0]
    if found_major != expected_major:
        raise SchemaVersionError(
            f"{path}: schema_version {found} is not supported (this build reads {expected_major}.x)"
        )


def _pack(bits: np.ndarray) -> str:
    return base64.b64encode(np.packbits(bits).tobytes()).decode("ascii")


def _unpack(text: str, P: int) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(text, validate=True), dtype=np.uint8)
    if raw.size != (P + 7) // 8:
        raise ValueError(f"expected {(P + 7) // 8} packed bytes, got {raw.size}")
    return np.unpackbits(raw, count=P).astype(np.uint8)


def save_dataset(d: Dataset, path: str | Path) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = DatasetCacheFile(
        schema_version=settings.schema_version,
        vocab=list(d.vocab.names),
        samples=[SampleRecord(id=s.id, label=s.label, bits=_pack(s.vector)) for s in d],
    )
    out.write_text(json.dumps(payload.model_dump(), indent=2) + "\n", encoding="utf-8")
    return out


def load_dataset_cache(path: str | Path) -> Dataset:
    p = Path(path)
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except OSError as e:
        raise DatasetError(f"cannot read dataset cache: {e.strerror}", p) from e
    except json.JSONDecodeError as e:
        raise DatasetError(f"invalid JSON: {e.msg}", p, e.lineno) from e
    check_schema_version(raw.get("schema_version", "0"), p)
    try:
        cache = DatasetCacheFile.model_validate(raw)
    except ValidationError as e:
        raise DatasetError(f"invalid dataset cache: {e.error_count()} schema error(s)", p) from e

    vocab = PermissionVocabulary(tuple(cache.vocab))
    X = np.zeros((len(cache.samples), vocab.P), dtype=np.uint8)
    for i, s in enumerate(cache.samples):
        try:
            X[i] = _unpack(s.bits, vocab.P)
        except (ValueError, TypeError) as e:
            raise DatasetError(f"sample {s.id!r}: bad bit payload ({e})", p) from e
    return Dataset(X, tuple(s.label for s in cache.samples), tuple(s.id for s in cache.samples), vocab)
