from __future__ import annotations

import hashlib
import io
import json
import logging
import re
import zipfile
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Literal

import numpy as np
import pandas as pd
from openpyxl import Workbook

from malkit import __version__
from malkit.dataset import (
    NOVEL,
    Dataset,
    Fold,
    SplitPlan,
    group_rare_families,
    leave_one_class_out,
    project,
    stratified_kfold,
    top_k_families,
)
from malkit.gbm import GBMModel, train
from malkit.metrics import (
    RecallMatrix,
    RocCurve,
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
from malkit.models import OSRThreshold, Provenance, RunConfig
from malkit.osnn import OSNNModel, is_unknown, novelty_scores, osnn_calibrate, osnn_ratio_batch
from malkit.osr import OpenSetClassifier, calibrate, classify_open_batch
from malkit.settings import settings

log = logging.getLogger(__name__)

Classifier = Literal["maxlogit", "osnn"]

CALIBRATION_CAVEAT = (
    "threshold calibrated on the training fold; known samples score higher on the data the model "
    "was fit to, so the test false-positive rate is underestimated"
)
TPR_TARGETS = (0.01, 0.05, 0.1)
# openpyxl stamps workbooks and their zip members with the current time otherwise
_FIXED_STAMP = datetime(2000, 1, 1)
_CORE_PROPS = "docProps/core.xml"
_STAMP_ELEMENT = re.compile(rb"(<dcterms:(?:created|modified)[^>]*>)[^<]*")
_UNSAFE_FILE_CHARS = re.compile(r"[^A-Za-z0-9_.-]")


def _sheet_name(name: str) -> str:
    safe = name.replace("/", "_").replace("\\", "_").replace(":", "_")
    return safe[:31] if len(safe) > 31 else safe


def _write_table(ws, rows: list[dict[str, Any]], headers: list[str] | None = None):
    if headers is None:
        headers = list(rows[0].keys()) if rows else []
    ws.append(headers)
    for row in rows:
        ws.append([row.get(h) for h in headers])


def _save_workbook(wb: Workbook, path: Path) -> None:
    buf = io.BytesIO()
    wb.save(buf)
    stamp = _FIXED_STAMP.timetuple()[:6]
    src = zipfile.ZipFile(io.BytesIO(buf.getvalue()))
    with src, zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as dst:
        for item in src.infolist():
            data = src.read(item.filename)
            if item.filename == _CORE_PROPS:
                data = _STAMP_ELEMENT.sub(rb"\g<1>2000-01-01T00:00:00Z", data)
            dst.writestr(zipfile.ZipInfo(item.filename, date_time=stamp), data, zipfile.ZIP_DEFLATED)


def prepare_dataset(d: Dataset, *, min_count: int, top_k: int | None = None) -> Dataset:
    """Fold rare families into ``others``, then optionally keep only the ``top_k`` largest."""
    d = group_rare_families(d, min_count)
    return top_k_families(d, top_k) if top_k else d


def make_plan(d: Dataset, mode: Literal["kfold", "loco"], k: int, seed: int) -> SplitPlan:
    if mode == "kfold":
        return stratified_kfold(d, k, seed)
    return leave_one_class_out(d, k, seed)


@dataclass(eq=False)
class FoldOutcome:
    index: int
    fold: Fold
    threshold: float
    model_hash: str | None
    truth: list[str]
    closed: list[str]
    open: list[str]
    scores: np.ndarray  # higher = more novel
    max_logits: np.ndarray | None = None

    @property
    def n_known(self) -> int:
        return len(self.fold.test)

    def record(self, fpr_targets: tuple[float, ...]) -> dict[str, Any]:
        known_truth = self.truth[: self.n_known]
        rec: dict[str, Any] = {
            "fold": self.index,
            "held_out": self.fold.held_out,
            "n_train": int(len(self.fold.train)),
            "n_test_known": self.n_known,
            "n_novel": int(len(self.fold.novel)),
            "threshold": self.threshold,
            "model_hash": self.model_hash,
            "closed_micro_recall": micro_recall(self.closed[: self.n_known], known_truth),
            "closed_macro_recall": macro_recall(self.closed[: self.n_known], known_truth),
            "open_micro_recall": micro_recall(self.open, self.truth),
            "open_macro_recall": macro_recall(self.open, self.truth),
        }
        rec.update(_novelty_summary(self.scores, self.truth, fpr_targets))
        rec["fp_decomposition"] = asdict(fp_decomposition(self.closed, self.open, self.truth))
        return rec


def _novelty_summary(scores: np.ndarray, truth: list[str], fpr_targets: tuple[float, ...]) -> dict[str, Any]:
    is_novel = np.asarray(truth, dtype=object) == NOVEL
    if is_novel.all() or not is_novel.any():
        return {"auc": None, "tpr_at_fpr": None}
    curve = novelty_roc(scores, is_novel)
    return {"auc": curve.auc, "tpr_at_fpr": {f"{t:g}": tpr_at_fpr(curve, t) for t in fpr_targets}}


def _calibration_rows(train_d: Dataset, calibration: Dataset | None) -> np.ndarray | None:
    if calibration is None:
        return None
    keep = np.isin(calibration.label_array(), np.asarray(sorted(set(train_d.labels)), dtype=object))
    dropped = int((~keep).sum())
    if dropped:
        log.warning("dropped %d calibration sample(s) whose family is not a model class", dropped)
    return calibration.X[keep]


def _run_fold_maxlogit(
    d: Dataset, i: int, fold: Fold, cfg: RunConfig, calibration: Dataset | None, threads: int
) -> FoldOutcome:
    train_d = d.subset(fold.train)
    model = train(train_d, cfg.gbm, threads=threads)
    X_cal = _calibration_rows(train_d, calibration)
    if X_cal is None:
        K = calibrate(model, train_d.X, cfg.fpr, source="training-fold")
    else:
        K = calibrate(model, X_cal, cfg.fpr, source="external-TT")
    test = fold.test_all
    res = classify_open_batch(K, d.X[test])
    return FoldOutcome(
        index=i,
        fold=fold,
        threshold=K.tau,
        model_hash=model.model_hash,
        truth=fold.test_truth(d),
        closed=res.closed,
        open=res.labels,
        scores=-res.max_logits,
        max_logits=res.max_logits,
    )


def _run_fold_osnn(
    d: Dataset, i: int, fold: Fold, cfg: RunConfig, calibration: Dataset | None, threads: int
) -> FoldOutcome:
    train_d = d.subset(fold.train)
    m = OSNNModel.from_dataset(train_d, distance=cfg.distance, unknown_rule=cfg.ratio_rule)
    X_cal = _calibration_rows(train_d, calibration)
    if X_cal is None:
        T = osnn_calibrate(m, train_d.X, cfg.fpr, leave_one_out=True)
    else:
        T = osnn_calibrate(m, X_cal, cfg.fpr)
    m = m.with_threshold(T)
    res = osnn_ratio_batch(m, d.X[fold.test_all])
    unknown = is_unknown(m, res.ratios)
    return FoldOutcome(
        index=i,
        fold=fold,
        threshold=T,
        model_hash=None,
        truth=fold.test_truth(d),
        closed=res.labels,
        open=[NOVEL if u else lb for lb, u in zip(res.labels, unknown)],
        scores=novelty_scores(m, res.ratios),
    )


@dataclass(eq=False)
class EvaluationReport:
    metrics: dict[str, Any]
    roc: pd.DataFrame  # family, threshold, fpr, tpr
    open_matrix: RecallMatrix
    closed_matrix: RecallMatrix
    per_fold: list[dict[str, Any]]
    fp_curve: pd.DataFrame | None = None
    provenance: Provenance = field(default_factory=lambda: Provenance(tool_version=__version__))


def _combined_hash(hashes: list[str | None]) -> str | None:
    if not hashes or any(h is None for h in hashes):
        return None
    return hashlib.sha256("\n".join(hashes).encode("utf-8")).hexdigest()


def _roc_rows(family: str, curve: RocCurve) -> pd.DataFrame:
    df = curve.to_frame()
    df.insert(0, "family", family)
    return df


def run_evaluation(
    d: Dataset,
    cfg: RunConfig,
    *,
    classifier: Classifier = "maxlogit",
    calibration: Dataset | None = None,
    threads: int | None = None,
) -> EvaluationReport:
    """Cross-validate an open-set classifier and assemble every report table.

    ``d`` is the raw labeled dataset; rare-family grouping, top-k selection and
    the split all follow ``cfg``. Per-fold metrics are averaged (headline) and
    also recomputed on the pooled predictions of all folds.
    """
    threads = threads or settings.threads
    d = prepare_dataset(d, min_count=cfg.min_count, top_k=cfg.top_k)
    plan = make_plan(d, cfg.mode, cfg.k, cfg.seed)
    if calibration is not None:
        calibration = project(calibration, d.vocab)
    run_fold = _run_fold_maxlogit if classifier == "maxlogit" else _run_fold_osnn
    fpr_targets = tuple(sorted({cfg.fpr, *TPR_TARGETS}))

    outcomes: list[FoldOutcome] = []
    for i, fold in enumerate(plan):
        log.info("%s fold %d/%d (held out: %s)", classifier, i + 1, len(plan), fold.held_out or "-")
        outcomes.append(run_fold(d, i, fold, cfg, calibration, threads))
    per_fold = [o.record(fpr_targets) for o in outcomes]

    truth = [lb for o in outcomes for lb in o.truth]
    open_pred = [lb for o in outcomes for lb in o.open]
    closed_known = [lb for o in outcomes for lb in o.closed[: o.n_known]]
    truth_known = [lb for o in outcomes for lb in o.truth[: o.n_known]]
    closed_all = [lb for o in outcomes for lb in o.closed]
    scores = np.concatenate([o.scores for o in outcomes])

    labels = [*d.known_families, NOVEL]
    open_matrix = recall_matrix(open_pred, truth, labels)
    closed_matrix = recall_matrix(closed_known, truth_known, d.known_families)
    fp = fp_decomposition(closed_all, open_pred, truth)

    roc_frames: list[pd.DataFrame] = []
    per_class_auc: dict[str, float] = {}
    if cfg.mode == "loco":
        for fam in d.known_families:
            group = [o for o in outcomes if o.fold.held_out == fam]
            t = np.concatenate([np.asarray(o.truth, dtype=object) == NOVEL for o in group])
            s = np.concatenate([o.scores for o in group])
            curve = novelty_roc(s, t)
            per_class_auc[fam] = curve.auc
            roc_frames.append(_roc_rows(fam, curve))
    pooled_novelty = _novelty_summary(scores, truth, fpr_targets)
    is_novel = np.asarray(truth, dtype=object) == NOVEL
    if is_novel.any() and not is_novel.all():
        roc_frames.append(_roc_rows("pooled", novelty_roc(scores, is_novel)))
    roc = (
        pd.concat(roc_frames, ignore_index=True)
        if roc_frames
        else pd.DataFrame(columns=["family", "threshold", "fpr", "tpr"])
    )

    fp_curve = None
    if classifier == "maxlogit":
        fp_curve = fp_decomposition_curve(closed_all, np.concatenate([o.max_logits for o in outcomes]), truth)

    def _mean(key: str) -> float | None:
        vals = [r[key] for r in per_fold if r[key] is not None]
        return float(np.mean(vals)) if vals else None

    source = "external-TT" if calibration is not None else "training-fold"
    provenance = Provenance(
        tool_version=__version__,
        run_config=cfg.model_dump(mode="json"),
        dataset_fingerprint=d.fingerprint(),
        model_hash=_combined_hash([o.model_hash for o in outcomes]),
    )
    metrics: dict[str, Any] = {
        "schema_version": settings.schema_version,
        "provenance": provenance.model_dump(mode="json"),
        "classifier": classifier,
        "mode": cfg.mode,
        "k": cfg.k,
        "seed": cfg.seed,
        "n_samples": d.n,
        "P": d.P,
        "known_families": d.known_families,
        "family_counts": dict(sorted(d.family_counts().items())),
        "calibration": {
            "source": source,
            "target_fpr": cfg.fpr,
            "caveat": CALIBRATION_CAVEAT if source == "training-fold" else None,
        },
        "averaged": {
            key: _mean(key)
            for key in (
                "closed_micro_recall",
                "closed_macro_recall",
                "open_micro_recall",
                "open_macro_recall",
                "auc",
            )
        },
        "pooled": {
            "closed_micro_recall": micro_recall(closed_known, truth_known),
            "closed_macro_recall": macro_recall(closed_known, truth_known),
            "open_micro_recall": micro_recall(open_pred, truth),
            "open_macro_recall": macro_recall(open_pred, truth),
            **pooled_novelty,
            "fp_decomposition": asdict(fp),
            "open_recall_matrix": open_matrix.to_record(),
            "closed_recall_matrix": closed_matrix.to_record(),
        },
        "per_class_auc": per_class_auc or None,
        "per_fold": per_fold,
    }
    return EvaluationReport(
        metrics=metrics,
        roc=roc,
        open_matrix=open_matrix,
        closed_matrix=closed_matrix,
        per_fold=per_fold,
        fp_curve=fp_curve,
        provenance=provenance,
    )


def _roc_file_name(family: str) -> str:
    if family == "pooled":
        return "roc.csv"
    return f"roc_{_UNSAFE_FILE_CHARS.sub('_', family)}.csv"


def _flat_fold_row(rec: dict[str, Any]) -> dict[str, Any]:
    row = {k: v for k, v in rec.items() if not isinstance(v, dict)}
    for k, v in (rec.get("tpr_at_fpr") or {}).items():
        row[f"tpr_at_fpr_{k}"] = v
    for k, v in rec["fp_decomposition"].items():
        row[k] = v
    return row


def _matrix_rows(m: RecallMatrix) -> list[dict[str, Any]]:
    rows = []
    for i, truth in enumerate(m.labels):
        row: dict[str, Any] = {"truth": truth}
        row.update({pred: float(m.rates[i, j]) for j, pred in enumerate(m.labels)})
        row["support"] = int(m.counts[i].sum())
        rows.append(row)
    return rows


def write_report(report: EvaluationReport, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    metrics_path = out / "metrics.json"
    metrics_path.write_text(json.dumps(report.metrics, indent=2) + "\n", encoding="utf-8")

    # one threshold,fpr,tpr file per curve; provenance goes to a sidecar
    paths: dict[str, Path] = {"metrics": metrics_path}
    roc_files: dict[str, str] = {}
    families = list(dict.fromkeys(report.roc["family"]))
    if "pooled" not in families:
        families.append("pooled")
    for fam in families:
        curve = report.roc.loc[report.roc["family"] == fam, ["threshold", "fpr", "tpr"]]
        path = out / _roc_file_name(fam)
        curve.to_csv(path, index=False, lineterminator="\n")
        roc_files[fam] = path.name
        paths["roc" if fam == "pooled" else f"roc_{fam}"] = path
    sidecar = {"provenance": report.provenance.model_dump(mode="json"), "curves": roc_files}
    paths["roc_provenance"] = out / "roc_provenance.json"
    paths["roc_provenance"].write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")

    wb = Workbook()
    wb.properties.created = _FIXED_STAMP
    wb.properties.modified = _FIXED_STAMP
    ws_open = wb.active
    ws_open.title = _sheet_name("open recall matrix")
    headers = ["truth", *report.open_matrix.labels, "support"]
    _write_table(ws_open, _matrix_rows(report.open_matrix), headers=headers)

    ws_closed = wb.create_sheet(_sheet_name("closed recall matrix"))
    headers = ["truth", *report.closed_matrix.labels, "support"]
    _write_table(ws_closed, _matrix_rows(report.closed_matrix), headers=headers)

    ws_folds = wb.create_sheet(_sheet_name("per fold"))
    _write_table(ws_folds, [_flat_fold_row(r) for r in report.per_fold])

    if report.fp_curve is not None:
        ws_curve = wb.create_sheet(_sheet_name("false alarm curve"))
        rows = [
            {k: (None if np.isinf(v) else v) for k, v in rec.items()}
            for rec in report.fp_curve.to_dict("records")
        ]
        _write_table(ws_curve, rows, headers=list(report.fp_curve.columns))

    m = report.metrics
    ws_meta = wb.create_sheet(_sheet_name("summary"))
    summary = [
        {"metric": "tool_version", "value": report.provenance.tool_version},
        {"metric": "dataset_fingerprint", "value": report.provenance.dataset_fingerprint},
        {"metric": "model_hash", "value": report.provenance.model_hash},
        {"metric": "classifier", "value": m["classifier"]},
        {"metric": "mode", "value": m["mode"]},
        {"metric": "folds", "value": len(report.per_fold)},
        {"metric": "n_samples", "value": m["n_samples"]},
        {"metric": "known_families", "value": len(m["known_families"])},
        {"metric": "calibration_source", "value": m["calibration"]["source"]},
        {"metric": "target_fpr", "value": m["calibration"]["target_fpr"]},
    ]
    summary += [{"metric": f"averaged_{k}", "value": v} for k, v in m["averaged"].items()]
    summary += [
        {"metric": f"pooled_{k}", "value": v}
        for k, v in m["pooled"].items()
        if not isinstance(v, dict)
    ]
    _write_table(ws_meta, summary, headers=["metric", "value"])

    xlsx_path = out / "recall_matrix.xlsx"
    _save_workbook(wb, xlsx_path)
    paths["recall_matrix"] = xlsx_path
    return paths


def run_bench(
    model: GBMModel,
    X: np.ndarray,
    *,
    repetitions: int = 30,
    osnn_train: Dataset | None = None,
    tau: float = float("-inf"),
) -> dict[str, Any]:
    """Seconds per sample for open-set classification of ``X``; with ``osnn_train``
    also an OSNN linear scan over that training set and the ratio between the two."""
    K = OpenSetClassifier(
        model,
        OSRThreshold(tau=tau, target_fpr=0.0, calibration_size=0, model_hash=model.model_hash),
    )
    maxlogit = time_inference(lambda Q: classify_open_batch(K, Q), X, repetitions)
    out: dict[str, Any] = {
        "n_queries": int(X.shape[0]),
        "repetitions": repetitions,
        "rounds": model.rounds,
        "max_depth": model.config.max_depth,
        "classes": len(model.classes),
        "maxlogit_seconds_per_sample": maxlogit.seconds_per_sample,
    }
    if osnn_train is not None:
        m = OSNNModel.from_dataset(osnn_train)
        osnn = time_inference(lambda Q: osnn_ratio_batch(m, Q), X, repetitions)
        out["osnn_training_size"] = osnn_train.n
        out["osnn_seconds_per_sample"] = osnn.seconds_per_sample
        out["osnn_over_maxlogit"] = timing_ratio(osnn, maxlogit)
    return out
