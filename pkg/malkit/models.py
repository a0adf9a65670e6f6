from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field

from malkit.settings import settings


class GBMConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    rounds: int = Field(default=100, ge=0)
    max_depth: int = Field(default=4, ge=1)
    learning_rate: float = Field(default=0.1, gt=0)
    min_leaf: int = Field(default=2, ge=1)
    seed: int = 0


class OSRThreshold(BaseModel):
    model_config = ConfigDict(frozen=True)

    tau: float
    target_fpr: float = Field(ge=0.0, le=1.0)
    calibration_size: int = Field(ge=0)
    calibration_source: Literal["training-fold", "external-TT"] = "training-fold"
    # Hash of the model the threshold was calibrated against.
    model_hash: str | None = None


class RunConfig(BaseModel):
    """Every CLI parameter, resolved (defaults < --config file < flags) before a command runs."""

    command: str
    data: str | None = None
    format: Literal["drebin-dir", "csv", "cache"] = "csv"
    labels: str | None = None
    skip_unlabeled: bool = False
    include_sdk23: bool = True
    model: str | None = None
    out: str | None = None
    out_dir: str | None = None
    inputs: list[str] = Field(default_factory=list)
    vocab: str | None = None
    mode: Literal["kfold", "loco"] = "kfold"
    k: int = Field(default=settings.folds, ge=2)
    seed: int = settings.seed
    fpr: float = Field(default=settings.default_fpr, ge=0.0, le=1.0)
    min_count: int = Field(default=settings.min_count, ge=1)
    top_k: int | None = Field(default=None, ge=1)
    calibration_data: str | None = None
    gbm: GBMConfig = Field(default_factory=GBMConfig)
    distance: Literal["hamming", "euclidean"] = "hamming"
    ratio_rule: Literal["original", "inverted"] = "original"
    n_queries: int = Field(default=1000, ge=1)
    repetitions: int = Field(default=30, ge=1)


class Provenance(BaseModel):
    tool_version: str
    run_config: dict[str, Any] | None = None
    dataset_fingerprint: str | None = None
    model_hash: str | None = None


class TreeRecord(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    class_index: int = Field(alias="class")
    # Preorder; {"leaf": value} or {"feature": f} followed by bit-0 then bit-1 subtree.
    nodes: list[dict[str, float | int]]


class ModelFile(BaseModel):
    schema_version: str
    config: GBMConfig
    classes: list[str]
    base_scores: list[float]
    learning_rate: float
    vocab: list[str]
    vocab_fingerprint: str
    model_hash: str
    train_deviance: list[float] = Field(default_factory=list)
    trees: list[TreeRecord]
    osr: OSRThreshold | None = None
    provenance: Provenance | None = None


class SampleRecord(BaseModel):
    id: str
    label: str
    bits: str  # base64 of np.packbits(vector)


class DatasetCacheFile(BaseModel):
    schema_version: str
    vocab: list[str]
    samples: list[SampleRecord]
