from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError

from malkit import __version__
from malkit.dataset import OTHERS, Dataset, load_dataset, load_samples, project
from malkit.dataset_store import save_dataset
from malkit.errors import DatasetError, MalkitError, ThresholdError
from malkit.evaluate_service import prepare_dataset, run_bench, run_evaluation, write_report
from malkit.gbm import GBMModel, train
from malkit.model_store import load_model, save_model
from malkit.models import ModelFile, Provenance, RunConfig
from malkit.osr import OpenSetClassifier, calibrate, classify_open_batch
from malkit.permissions import (
    PermissionVocabulary,
    build_vocabulary,
    encode,
    filter_system_permissions,
    read_permission_file,
)
from malkit.settings import settings

log = logging.getLogger("malkit")

# argparse destinations that are not RunConfig fields
_CONTROL_KEYS = {"config", "verbose", "quiet", "all_permissions"}
_GBM_KEYS = {"rounds", "max_depth", "learning_rate", "min_leaf"}
_DATASET_SUFFIXES = {".csv", ".json"}


def _infer_format(path: Path) -> str:
    if path.is_dir():
        return "drebin-dir"
    return "cache" if path.suffix.lower() == ".json" else "csv"


def _add_data_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--data", required=required, help="dataset path (CSV, Drebin feature dir or JSON cache)")
    p.add_argument("--format", choices=["drebin-dir", "csv", "cache"])
    p.add_argument("--labels", help="label CSV for --format drebin-dir (id,family)")
    p.add_argument("--skip-unlabeled", action="store_true", default=argparse.SUPPRESS)


def _add_gbm_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rounds", type=int, help="boosting rounds t")
    p.add_argument("--max-depth", type=int, help="tree depth d")
    p.add_argument("--learning-rate", type=float, help="shrinkage eta")
    p.add_argument("--min-leaf", type=int, help="minimum samples per leaf")


def _add_split_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=["kfold", "loco"])
    p.add_argument("--k", type=int, help="number of folds")
    p.add_argument("--min-count", type=int, help="families below this size become 'others'")
    p.add_argument("--top-k", type=int, help="keep only the k largest families")
    p.add_argument("--fpr", type=float, help="target false-positive rate for threshold calibration")
    p.add_argument("--seed", type=int)
    p.add_argument("--calibration-data", help="external calibration set (TT) instead of the training fold")
    p.add_argument("--out-dir", help="report directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="malkit", description="Android malware family classification with novelty detection")
    ap.add_argument("--version", action="version", version=f"malkit {__version__}")
    ap.add_argument("--config", help="JSON file with RunConfig fields; explicit flags win")
    verbosity = ap.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def cmd(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, argument_default=argparse.SUPPRESS)
        # also accepted after the command name; unset here leaves the top-level value
        p.add_argument("--config", help="JSON file with RunConfig fields; explicit flags win")
        return p

    p = cmd("extract", "print the permissions requested by manifests or feature files")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--exclude-sdk23", dest="include_sdk23", action="store_false")
    p.add_argument("--all", dest="all_permissions", action="store_true", help="keep non-system permissions")
    p.add_argument("--out")

    p = cmd("build-vocab", "build the permission vocabulary")
    p.add_argument("inputs", nargs="*", default=[])
    _add_data_args(p, required=False)
    p.add_argument("--exclude-sdk23", dest="include_sdk23", action="store_false")
    p.add_argument("--out", required=True)

    p = cmd("encode", "one-hot encode samples against a vocabulary")
    p.add_argument("inputs", nargs="*", default=[])
    _add_data_args(p, required=False)
    p.add_argument("--vocab")
    p.add_argument("--exclude-sdk23", dest="include_sdk23", action="store_false")
    p.add_argument("--out", required=True)

    p = cmd("train", "train the boosted-tree classifier")
    _add_data_args(p)
    _add_gbm_args(p)
    p.add_argument("--min-count", type=int)
    p.add_argument("--top-k", type=int)
    p.add_argument("--fpr", type=float, help="target FPR for the threshold stored with the model")
    p.add_argument("--out", required=True)

    p = cmd("calibrate", "calibrate the novelty threshold on a known-family set")
    p.add_argument("--model", required=True)
    _add_data_args(p)
    p.add_argument("--fpr", type=float)
    p.add_argument("--out", help="defaults to overwriting --model")

    p = cmd("predict", "classify samples; rejected ones are labeled NOVEL")
    p.add_argument("--model", required=True)
    p.add_argument("--input", dest="inputs", action="append", required=True)
    p.add_argument("--exclude-sdk23", dest="include_sdk23", action="store_false")
    p.add_argument("--out")

    p = cmd("evaluate", "cross-validate MaxLogit open-set classification")
    _add_data_args(p)
    _add_split_args(p)
    _add_gbm_args(p)

    p = cmd("baseline-osnn", "cross-validate the OSNN baseline")
    _add_data_args(p)
    _add_split_args(p)
    p.add_argument("--distance", choices=["hamming", "euclidean"])
    p.add_argument("--ratio-rule", choices=["original", "inverted"])

    p = cmd("bench", "time per-sample inference")
    p.add_argument("--model", required=True)
    _add_data_args(p, required=False)
    p.add_argument("--n-queries", type=int)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    return ap


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """defaults < --config JSON < explicit flags."""
    merged: dict[str, Any] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            merged.update(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as e:
            raise MalkitError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    flags = {k: v for k, v in vars(args).items() if k not in _CONTROL_KEYS and v is not None}
    gbm = dict(merged.get("gbm") or {})
    gbm.update({k: flags.pop(k) for k in list(flags) if k in _GBM_KEYS})
    merged.update(flags)
    if gbm:
        merged["gbm"] = gbm
    if merged.get("data") and "format" not in merged:
        merged["format"] = _infer_format(Path(merged["data"]))
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(map(str, err['loc']))}: {err['msg']}" for err in e.errors())
        raise MalkitError(f"invalid configuration: {problems}") from e


def _load(cfg: RunConfig) -> Dataset:
    if not cfg.data:
        raise MalkitError(f"{cfg.command} needs --data")
    return load_dataset(cfg.data, cfg.format, labels_path=cfg.labels, skip_unlabeled=cfg.skip_unlabeled)


def _provenance(cfg: RunConfig, d: Dataset | None, model_hash: str | None) -> Provenance:
    return Provenance(
        tool_version=__version__,
        run_config=cfg.model_dump(mode="json"),
        dataset_fingerprint=d.fingerprint() if d is not None else None,
        model_hash=model_hash,
    )


def _emit_csv(df: pd.DataFrame, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(out, index=False, lineterminator="\n")
        print(f"Wrote {out}")
    else:
        df.to_csv(sys.stdout, index=False, lineterminator="\n")


def _read_samples(inputs: Sequence[str], include_sdk23: bool) -> tuple[list[str], list[list[str]]]:
    ids: list[str] = []
    sets: list[list[str]] = []
    for raw in inputs:
        p = Path(raw)
        ids.append(p.stem)
        sets.append(filter_system_permissions(read_permission_file(p, include_sdk23=include_sdk23)))
    return ids, sets


def cmd_extract(cfg: RunConfig, args: argparse.Namespace) -> int:
    rows = []
    for raw in cfg.inputs:
        names = read_permission_file(raw, include_sdk23=cfg.include_sdk23)
        if not getattr(args, "all_permissions", False):
            names = filter_system_permissions(names)
        rows += [{"input": raw, "permission": n} for n in names]
    _emit_csv(pd.DataFrame(rows, columns=["input", "permission"]), cfg.out)
    return 0


def cmd_build_vocab(cfg: RunConfig, args: argparse.Namespace) -> int:
    if cfg.data:
        vocab = _load(cfg).vocab
    elif cfg.inputs:
        vocab = build_vocabulary(_read_samples(cfg.inputs, cfg.include_sdk23)[1])
    else:
        raise MalkitError("build-vocab needs --data or input files")
    out = vocab.save(cfg.out)
    print(f"Wrote vocabulary ({vocab.P} permissions): {out}")
    return 0


def cmd_encode(cfg: RunConfig, args: argparse.Namespace) -> int:
    vocab = PermissionVocabulary.load(cfg.vocab) if cfg.vocab else None
    if cfg.data:
        d = _load(cfg)
        if vocab is not None:
            d = project(d, vocab)
        out = save_dataset(d, cfg.out)
        print(f"Wrote dataset cache (n={d.n}, P={d.P}): {out}")
        return 0
    if not cfg.inputs:
        raise MalkitError("encode needs --data or input files")
    ids, sets = _read_samples(cfg.inputs, cfg.include_sdk23)
    vocab = vocab or build_vocabulary(sets)
    rows = []
    for sid, names in zip(ids, sets):
        enc = encode(names, vocab)
        if enc.ignored:
            log.warning("%s: %d permission(s) not in the vocabulary were ignored", sid, enc.ignored)
        rows.append([sid, *enc.vector.tolist()])
    _emit_csv(pd.DataFrame(rows, columns=["id", *vocab.names]), cfg.out)
    return 0


def _known_only(d: Dataset) -> Dataset:
    keep = np.flatnonzero(d.label_array() != OTHERS)
    return d.subset(keep) if len(keep) != d.n else d


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    d = _known_only(prepare_dataset(_load(cfg), min_count=cfg.min_count, top_k=cfg.top_k))
    model = train(d, cfg.gbm, threads=settings.threads)
    K = calibrate(model, d.X, cfg.fpr, source="training-fold")
    out = save_model(model, cfg.out, threshold=K.threshold, provenance=_provenance(cfg, d, model.model_hash))
    print(f"Trained {len(model.classes)} classes x {model.rounds} rounds on n={d.n}; tau={K.tau!r}")
    print(f"Wrote model: {out}")
    return 0


def _calibration_set(cfg: RunConfig, model: GBMModel) -> Dataset:
    d = project(_load(cfg), model.vocab)
    keep = np.isin(d.label_array(), np.asarray(model.classes, dtype=object))
    if not keep.all():
        log.warning("dropped %d calibration sample(s) whose family is not a model class", int((~keep).sum()))
    return d.subset(np.flatnonzero(keep))


def cmd_calibrate(cfg: RunConfig, args: argparse.Namespace) -> int:
    model, mf = load_model(cfg.model)
    d = _calibration_set(cfg, model)
    K = calibrate(model, d.X, cfg.fpr, source="external-TT")
    prov = _provenance(cfg, d, model.model_hash)
    out = save_model(model, cfg.out or cfg.model, threshold=K.threshold, provenance=prov)
    print(f"Calibrated tau={K.tau!r} on k={d.n} samples at fpr={cfg.fpr:g}")
    print(f"Wrote model: {out}")
    return 0


def _classifier(model: GBMModel, mf: ModelFile) -> OpenSetClassifier:
    if mf.osr is None:
        raise ThresholdError(f"{len(mf.trees)}-tree model has no calibrated threshold; run calibrate first")
    return OpenSetClassifier(model, mf.osr)


def _predict_inputs(cfg: RunConfig, vocab: PermissionVocabulary) -> tuple[list[str], np.ndarray]:
    ids: list[str] = []
    blocks: list[np.ndarray] = []
    for raw in cfg.inputs:
        p = Path(raw)
        if p.is_dir() or p.suffix.lower() in _DATASET_SUFFIXES:
            batch = load_samples(p, _infer_format(p), vocab)
            ids += list(batch.ids)
            blocks.append(batch.X)
            continue
        names = filter_system_permissions(read_permission_file(p, include_sdk23=cfg.include_sdk23))
        enc = encode(names, vocab)
        if enc.ignored:
            log.warning("%s: %d permission(s) unknown to the model were ignored", p, enc.ignored)
        ids.append(p.stem)
        blocks.append(enc.vector[None, :])
    if not blocks:
        raise DatasetError("no input samples")
    return ids, np.concatenate(blocks, axis=0)


def cmd_predict(cfg: RunConfig, args: argparse.Namespace) -> int:
    model, mf = load_model(cfg.model)
    K = _classifier(model, mf)
    ids, X = _predict_inputs(cfg, model.vocab)
    res = classify_open_batch(K, X)
    df = pd.DataFrame({"id": ids, "label": res.labels, "max_logit": res.max_logits})
    _emit_csv(df, cfg.out)
    return 0


def _evaluate(cfg: RunConfig, classifier: str) -> int:
    d = _load(cfg)
    calibration = None
    if cfg.calibration_data:
        cp = Path(cfg.calibration_data)
        calibration = load_dataset(cp, _infer_format(cp))
    report = run_evaluation(d, cfg, classifier=classifier, calibration=calibration, threads=settings.threads)
    out_dir = Path(cfg.out_dir or Path(settings.report_dir) / f"{cfg.command}_{cfg.mode}")
    paths = write_report(report, out_dir)
    avg = report.metrics["averaged"]
    print(
        f"{classifier} {cfg.mode}: open micro={avg['open_micro_recall']:.4f} "
        f"macro={avg['open_macro_recall']:.4f} closed micro={avg['closed_micro_recall']:.4f}"
    )
    for name, path in paths.items():
        print(f"Wrote {name}: {path}")
    return 0


def cmd_evaluate(cfg: RunConfig, args: argparse.Namespace) -> int:
    return _evaluate(cfg, "maxlogit")


def cmd_baseline_osnn(cfg: RunConfig, args: argparse.Namespace) -> int:
    return _evaluate(cfg, "osnn")


def cmd_bench(cfg: RunConfig, args: argparse.Namespace) -> int:
    model, mf = load_model(cfg.model)
    rng = np.random.default_rng(cfg.seed)
    osnn_train = None
    if cfg.data:
        d = _known_only(project(_load(cfg), model.vocab))
        X = d.X[rng.integers(0, d.n, size=cfg.n_queries)]
        osnn_train = d
    else:
        X = (rng.random((cfg.n_queries, model.P)) < 0.1).astype(np.uint8)
    tau = mf.osr.tau if mf.osr is not None else float("-inf")
    results = run_bench(model, X, repetitions=cfg.repetitions, osnn_train=osnn_train, tau=tau)
    payload = {
        "schema_version": settings.schema_version,
        "provenance": _provenance(cfg, osnn_train, model.model_hash).model_dump(mode="json"),
        **results,
    }
    text = json.dumps(payload, indent=2) + "\n"
    if cfg.out:
        Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
        Path(cfg.out).write_text(text, encoding="utf-8")
        print(f"Wrote bench report: {cfg.out}")
    else:
        sys.stdout.write(text)
    return 0


COMMANDS = {
    "extract": cmd_extract,
    "build-vocab": cmd_build_vocab,
    "encode": cmd_encode,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "baseline-osnn": cmd_baseline_osnn,
    "bench": cmd_bench,
}


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.ERROR if args.quiet else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    _configure_logging(args)
    try:
        cfg = resolve_config(args)
        return COMMANDS[cfg.command](cfg, args)
    except (MalkitError, OSError) as e:
        print(f"malkit {args.command}: error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
