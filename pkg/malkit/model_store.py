from __future__ import annotations

import json
from pathlib import Path

from pydantic import ValidationError

from malkit import __version__
from malkit.dataset_store import check_schema_version
from malkit.errors import ModelFileError, TrainingError
from malkit.gbm import DecisionTree, GBMModel
from malkit.models import ModelFile, OSRThreshold, Provenance, TreeRecord
from malkit.permissions import PermissionVocabulary
from malkit.settings import settings


def to_model_file(
    model: GBMModel,
    *,
    threshold: OSRThreshold | None = None,
    provenance: Provenance | None = None,
) -> ModelFile:
    rec = model.to_record()
    return ModelFile(
        schema_version=settings.schema_version,
        config=model.config,
        classes=rec["classes"],
        base_scores=rec["base_scores"],
        learning_rate=model.learning_rate,
        vocab=rec["vocab"],
        vocab_fingerprint=model.vocab_fingerprint,
        model_hash=model.model_hash,
        train_deviance=list(model.train_deviance),
        trees=[TreeRecord.model_validate(t) for t in rec["trees"]],
        osr=threshold,
        provenance=provenance or Provenance(tool_version=__version__, model_hash=model.model_hash),
    )


def save_model(
    model: GBMModel,
    path: str | Path,
    *,
    threshold: OSRThreshold | None = None,
    provenance: Provenance | None = None,
) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = to_model_file(model, threshold=threshold, provenance=provenance).model_dump(by_alias=True)
    out.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return out


def from_model_file(mf: ModelFile, source: str | Path = "<model>") -> GBMModel:
    try:
        trees = tuple(DecisionTree.from_nodes(t.class_index, t.nodes) for t in mf.trees)
        model = GBMModel(
            config=mf.config,
            classes=tuple(mf.classes),
            base_scores=mf.base_scores,
            trees=trees,
            vocab=PermissionVocabulary(tuple(mf.vocab)),
            train_deviance=tuple(mf.train_deviance),
        )
    except (ValueError, TrainingError) as e:
        raise ModelFileError(f"{source}: invalid model: {e}") from e
    if model.model_hash != mf.model_hash:
        raise ModelFileError(f"{source}: stored model_hash does not match the model contents")
    return model


def load_model(path: str | Path) -> tuple[GBMModel, ModelFile]:
    """Load a model file; returns the model and the parsed file (for its osr/provenance blocks)."""
    p = Path(path)
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except OSError as e:
        raise ModelFileError(f"{p}: cannot read model: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise ModelFileError(f"{p}: invalid JSON at line {e.lineno}: {e.msg}") from e
    check_schema_version(raw.get("schema_version", "0"), p)
    try:
        mf = ModelFile.model_validate(raw)
    except ValidationError as e:
        raise ModelFileError(f"{p}: invalid model file ({e.error_count()} schema error(s))") from e
    return from_model_file(mf, p), mf
