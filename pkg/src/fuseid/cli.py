"""Command-line pipeline: synth -> train -> extract -> svm-train -> eval -> compare.

Every config key can be overridden with ``--Section.key value`` (or
``--Section.key=value``), e.g. ``--TrainConfig.learning_rate 0.01``.
Errors exit nonzero with one ``E_CODE: message`` line on stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from contextlib import contextmanager
from pathlib import Path

from . import embedding_store as es
from . import svm as svm_mod
from . import two_branch as tb
from .config import SECTIONS, ConfigError, ExperimentConfig, apply_overrides, load_document, parse_value, resolve
from .evaluate import BASELINE, EvalReport, MismatchedTestSetError, compare_conditions, read_confusion_csv
from .features import FeatureFormatError, FeatureSet

log = logging.getLogger("fuseid")

AIDED = "fused_aided"
MASKED = "fused_masked"

ERROR_CODES = [
    (ConfigError, "E_CONFIG"),
    (es.DimensionMismatchError, "E_DIMENSION"),
    (es.DuplicateRecordError, "E_DUPLICATE"),
    (es.ValidationError, "E_VALIDATION"),
    (es.EmptyDatasetError, "E_EMPTY"),
    (es.EmbeddingFormatError, "E_FORMAT"),
    (tb.ModelVersionError, "E_VERSION"),
    (tb.ModelFormatError, "E_FORMAT"),
    (svm_mod.SvmFormatError, "E_FORMAT"),
    (FeatureFormatError, "E_FORMAT"),
    (tb.DivergedTrainingError, "E_DIVERGED"),
    (svm_mod.ClassCoverageError, "E_CLASS_COVERAGE"),
    (MismatchedTestSetError, "E_MISMATCH"),
    (FileNotFoundError, "E_NOT_FOUND"),
    (OSError, "E_IO"),
    (ValueError, "E_INVALID"),
]


class UsageError(ValueError):
    pass


def error_code(exc: BaseException) -> str:
    if isinstance(exc, UsageError):
        return "E_USAGE"
    for cls, code in ERROR_CODES:
        if isinstance(exc, cls):
            return code
    return "E_INTERNAL"


def git_blob_hash(path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@contextmanager
def run_log(cfg: ExperimentConfig, command: str, inputs=()):
    """Log resolved config, input hashes and timing; append to report_dir/run_log.jsonl."""
    entry = {"command": command, "config": cfg.to_dict(),
             "inputs": {str(p): git_blob_hash(p) for p in inputs}}
    timings: dict = {}
    entry["timings_s"] = timings
    t0 = time.perf_counter()
    yield timings
    timings["total"] = round(time.perf_counter() - t0, 4)
    line = json.dumps(entry, sort_keys=True)
    log.info("%s: run log %s", command, line)
    if cfg.paths.report_dir:
        d = Path(cfg.paths.report_dir)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "run_log.jsonl", "a") as fh:
            fh.write(line + "\n")


def _require(value, what: str):
    if not value:
        raise UsageError(f"missing {what}")
    return value


def _load_dataset(path):
    manifest, records = es.read_embeddings(_require(path, "data file (--data / paths.data)"))
    manifest.check(records=records)
    return manifest, records


# ---------------------------------------------------------------- subcommands

def cmd_synth(cfg: ExperimentConfig, out=None) -> Path:
    out = Path(_require(out or cfg.paths.data, "output path (--out / paths.data)"))
    try:
        cfg.synth.validate()
        if cfg.synth.num_identities < 2:
            raise ValueError("need at least 2 identities")
    except ValueError as exc:
        raise ConfigError(f"invalid SynthConfig: {exc}") from None
    with run_log(cfg, "synth"):
        records = es.generate_synthetic(cfg.synth)
        out.parent.mkdir(parents=True, exist_ok=True)
        es.write_embeddings(records, out)
    manifest = es.make_manifest(records)
    print(json.dumps({"path": str(out), **manifest.summary()}, sort_keys=True))
    return out


def cmd_train(cfg: ExperimentConfig, data=None, model_out=None, history_out=None):
    data = _require(data or cfg.paths.data, "data file (--data / paths.data)")
    model_out = Path(_require(model_out or cfg.paths.model, "model path (--model / paths.model)"))
    history_out = Path(history_out or f"{model_out}.history.json")
    manifest, records = _load_dataset(data)
    pairs, skipped = es.pair_samples(records, es.Split.TRAIN, manifest.label_map)
    spec = cfg.arch_spec(manifest.voice_dim, manifest.face_dim, manifest.num_speakers)
    tc = cfg.train
    log.info("train: lr=%s batch=%s (effective %d) epochs=%d dropout=%s pairs=%d skipped=%d",
             tc.learning_rate, tc.batch_size, min(tc.batch_size, len(pairs)), tc.epochs,
             list(spec.dropout_rates), len(pairs), skipped)
    with run_log(cfg, "train", [data]) as timings:
        t = time.perf_counter()
        model = tb.build_model(spec, seed=cfg.seed)
        model, history = tb.train(model, pairs, tc)
        timings["train"] = round(time.perf_counter() - t, 4)
        model_out.parent.mkdir(parents=True, exist_ok=True)
        tb.save_model(model, model_out)
    history_out.write_text(json.dumps({
        "loss": history, "epochs": tc.epochs, "learning_rate": tc.learning_rate,
        "batch_size": tc.batch_size, "effective_batch_size": min(tc.batch_size, len(pairs)),
    }, indent=2, sort_keys=True) + "\n")
    return model_out, history


def extract_set(records, manifest, split, model=None, mask_face=False) -> FeatureSet:
    """Features for every paired clip of ``split``. Without a model the raw
    voice embeddings are used (the voice-only baseline)."""
    pairs, _ = es.pair_samples(records, split, manifest.label_map)
    voice, face, labels = es.stack_pairs(pairs)
    if model is None:
        return FeatureSet(voice, labels, es.Split(split).value, BASELINE, False,
                          manifest.num_speakers)
    spec = model.spec
    if (spec.voice_in_dim, spec.face_in_dim) != (manifest.voice_dim, manifest.face_dim):
        raise es.DimensionMismatchError(
            f"model expects voice/face dims ({spec.voice_in_dim}, {spec.face_in_dim}), "
            f"data has ({manifest.voice_dim}, {manifest.face_dim})"
        )
    X = tb.extract_feature_matrix(model, voice, None if mask_face else face)
    return FeatureSet(X, labels, es.Split(split).value, MASKED if mask_face else AIDED,
                      mask_face, manifest.num_speakers)


def cmd_extract(cfg: ExperimentConfig, out, split="test", mask_face=False, baseline=False,
                data=None, model_path=None) -> FeatureSet:
    data = _require(data or cfg.paths.data, "data file (--data / paths.data)")
    inputs = [data]
    model = None
    if not baseline:
        model_path = _require(model_path or cfg.paths.model, "model file (--model / paths.model)")
        inputs.append(model_path)
        model = tb.load_model(model_path)
    manifest, records = _load_dataset(data)
    with run_log(cfg, "extract", inputs):
        fs = extract_set(records, manifest, split, model, mask_face)
        out = Path(_require(out, "output path (--out)"))
        out.parent.mkdir(parents=True, exist_ok=True)
        fs.save(out)
    return fs


def svm_from_features(cfg: ExperimentConfig, fs: FeatureSet) -> svm_mod.SvmModel:
    s = cfg.svm
    kernel = svm_mod.KernelSpec(s.kernel, s.degree, s.gamma, s.coef0)
    return svm_mod.train_multiclass(fs.features, fs.labels, kernel, s.regularization,
                                    num_classes=fs.num_classes, tol=s.tol)


def cmd_svm_train(cfg: ExperimentConfig, features, out=None) -> svm_mod.SvmModel:
    out = Path(_require(out or cfg.paths.svm, "SVM output path (--out / paths.svm)"))
    fs = FeatureSet.load(features)
    if fs.split != es.Split.TRAIN.value:
        log.warning("training the SVM on %s-split features", fs.split)
    with run_log(cfg, "svm-train", [features]) as timings:
        t = time.perf_counter()
        model = svm_from_features(cfg, fs)
        timings["svm"] = round(time.perf_counter() - t, 4)
        out.parent.mkdir(parents=True, exist_ok=True)
        svm_mod.save_svm(model, out)
    return model


def evaluate_features(model: svm_mod.SvmModel, fs: FeatureSet) -> EvalReport:
    pred = svm_mod.predict(model, fs.features)
    return EvalReport.from_predictions(fs.condition, pred, fs.labels, fs.num_classes)


def write_report(report: EvalReport, report_dir) -> Path:
    d = Path(report_dir)
    d.mkdir(parents=True, exist_ok=True)
    path = d / f"{report.condition}.json"
    path.write_text(report.to_json())
    (d / f"{report.condition}_confusion.csv").write_text(report.confusion_csv())
    return path


def cmd_eval(cfg: ExperimentConfig, features, svm_path=None, report_dir=None) -> EvalReport:
    svm_path = _require(svm_path or cfg.paths.svm, "SVM file (--svm / paths.svm)")
    report_dir = _require(report_dir or cfg.paths.report_dir, "report dir (--report-dir)")
    with run_log(cfg, "eval", [features, svm_path]):
        report = evaluate_features(svm_mod.load_svm(svm_path), FeatureSet.load(features))
        write_report(report, report_dir)
    print(f"{report.condition}: top-1 {100 * report.top1:.2f}% over {report.n_samples} samples")
    return report


def cmd_baseline(cfg: ExperimentConfig, data=None, report_dir=None) -> EvalReport:
    data = _require(data or cfg.paths.data, "data file (--data / paths.data)")
    report_dir = _require(report_dir or cfg.paths.report_dir, "report dir (--report-dir)")
    manifest, records = _load_dataset(data)
    with run_log(cfg, "baseline", [data]):
        train_fs = extract_set(records, manifest, es.Split.TRAIN)
        test_fs = extract_set(records, manifest, es.Split.TEST)
        report = evaluate_features(svm_from_features(cfg, train_fs), test_fs)
        write_report(report, report_dir)
    print(f"{report.condition}: top-1 {100 * report.top1:.2f}% over {report.n_samples} samples")
    return report


def cmd_compare(cfg: ExperimentConfig, report_paths, out_dir=None):
    reports = []
    for p in report_paths:
        p = Path(p)
        csv_path = p.with_name(f"{p.stem}_confusion.csv")
        cm = None
        if csv_path.exists():
            cm = read_confusion_csv(csv_path.read_text())
        reports.append(EvalReport.from_json(p.read_text(), cm))
    table = compare_conditions(reports)
    out_dir = out_dir or cfg.paths.report_dir
    if out_dir:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "comparison.json").write_text(table.to_json())
        (d / "comparison.txt").write_text(table.to_text())
    print(table.to_text(), end="")
    return table


def run_pipeline(cfg: ExperimentConfig, workdir) -> dict:
    """Full experiment in ``workdir``; returns {condition: EvalReport} plus the table."""
    w = Path(workdir)
    w.mkdir(parents=True, exist_ok=True)
    cfg.paths.report_dir = cfg.paths.report_dir or str(w / "reports")
    if not cfg.paths.data:
        cfg.paths.data = str(w / "data.fuseid")
        cmd_synth(cfg)
    cfg.paths.model = cfg.paths.model or str(w / "model.fusemdl")
    cmd_train(cfg)
    reports = {BASELINE: cmd_baseline(cfg)}
    for condition, mask in ((AIDED, False), (MASKED, True)):
        feats = {split: w / f"features_{condition}_{split}.fusefea" for split in ("train", "test")}
        for split, path in feats.items():
            cmd_extract(cfg, path, split=split, mask_face=mask)
        svm_path = w / f"svm_{condition}.fusesvm"
        cmd_svm_train(cfg, feats["train"], svm_path)
        reports[condition] = cmd_eval(cfg, feats["test"], svm_path)
    rd = Path(cfg.paths.report_dir)
    table = cmd_compare(cfg, [rd / f"{c}.json" for c in (BASELINE, AIDED, MASKED)])
    return {"reports": reports, "table": table}


# ---------------------------------------------------------------- argument parsing

def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fuseid", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON config document")
    p.add_argument("--seed", type=int, help="global seed (fallback: $FUSEID_SEED, then 0)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic shared-latent FUSEID1 file")
    s.add_argument("--out")
    s.add_argument("--identities", type=int)
    s.add_argument("--voice-noise", type=float)
    s.add_argument("--face-noise", type=float)

    s = sub.add_parser("train", help="train the two-branch network")
    s.add_argument("--data")
    s.add_argument("--model", help="output model file")
    s.add_argument("--history", help="loss history JSON (default: <model>.history.json)")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)

    s = sub.add_parser("extract", help="extract fused features for one split")
    s.add_argument("--data")
    s.add_argument("--model")
    s.add_argument("--split", choices=["train", "test"], default="test")
    s.add_argument("--mask-face", action="store_true", help="replace face inputs by zero vectors")
    s.add_argument("--baseline", action="store_true", help="raw voice embeddings, no model")
    s.add_argument("--out", required=True)

    s = sub.add_parser("svm-train", help="train the one-vs-one SVM on a features file")
    s.add_argument("--features", required=True)
    s.add_argument("--out")

    s = sub.add_parser("eval", help="evaluate an SVM on a test features file")
    s.add_argument("--features", required=True)
    s.add_argument("--svm")
    s.add_argument("--report-dir")

    s = sub.add_parser("baseline", help="SVM directly on voice embeddings")
    s.add_argument("--data")
    s.add_argument("--report-dir")

    s = sub.add_parser("compare", help="tabulate reports against the voice-only baseline")
    s.add_argument("reports", nargs="+")
    s.add_argument("--out-dir")

    s = sub.add_parser("run", help="full pipeline in a work directory")
    s.add_argument("--workdir", required=True)
    s.add_argument("--data")
    s.add_argument("--epochs", type=int)
    return p


def _split_overrides(extra):
    """Pull ``--Section.key value`` / ``--Section.key=value`` pairs out of argv leftovers."""
    overrides, i = [], 0
    while i < len(extra):
        tok = extra[i]
        name = tok[2:] if tok.startswith("--") else ""
        key = name.split("=", 1)[0]
        if key.split(".", 1)[0] not in SECTIONS or "." not in key:
            raise UsageError(f"unrecognized argument {tok!r}")
        if "=" in name:
            overrides.append((key, parse_value(name.split("=", 1)[1])))
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for {tok}")
            overrides.append((key, parse_value(extra[i + 1])))
            i += 2
    return overrides


_FLAG_KEYS = {
    "identities": "SynthConfig.num_identities",
    "voice_noise": "SynthConfig.voice_noise_sigma",
    "face_noise": "SynthConfig.face_noise_sigma",
    "epochs": "TrainConfig.epochs",
    "lr": "TrainConfig.learning_rate",
    "batch_size": "TrainConfig.batch_size",
}


def _resolve_config(args, extra) -> ExperimentConfig:
    doc = load_document(args.config) if args.config else {}
    flags = [(key, getattr(args, attr)) for attr, key in _FLAG_KEYS.items()
             if getattr(args, attr, None) is not None]
    if args.seed is not None:
        flags.append(("seed", args.seed))
    return resolve(apply_overrides(doc, flags + _split_overrides(extra)))


def main(argv=None) -> int:
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else
                        logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _resolve_config(args, extra)
        c = args.command
        if c == "synth":
            cmd_synth(cfg, args.out)
        elif c == "train":
            cmd_train(cfg, args.data, args.model, args.history)
        elif c == "extract":
            cmd_extract(cfg, args.out, args.split, args.mask_face, args.baseline,
                        args.data, args.model)
        elif c == "svm-train":
            cmd_svm_train(cfg, args.features, args.out)
        elif c == "eval":
            cmd_eval(cfg, args.features, args.svm, args.report_dir)
        elif c == "baseline":
            cmd_baseline(cfg, args.data, args.report_dir)
        elif c == "compare":
            cmd_compare(cfg, args.reports, args.out_dir)
        elif c == "run":
            if args.data:
                cfg.paths.data = args.data
            run_pipeline(cfg, args.workdir)
    except Exception as exc:  # every failure becomes one parsable line
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"{error_code(exc)}: {msg}", file=sys.stderr)
        if args.verbose > 1:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
