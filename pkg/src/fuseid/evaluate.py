"""Top-1 accuracy, confusion matrices and the condition comparison table."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

CONDITIONS = ("voice_only_baseline", "fused_aided", "fused_masked")
BASELINE = "voice_only_baseline"


class MismatchedTestSetError(ValueError):
    pass


def top1_accuracy(predictions, truths) -> float:
    p = np.asarray(predictions).reshape(-1)
    t = np.asarray(truths).reshape(-1)
    if len(p) != len(t):
        raise ValueError(f"{len(p)} predictions for {len(t)} truths")
    if len(t) == 0:
        raise ValueError("top-1 accuracy of an empty set is undefined")
    return int(np.sum(p == t)) / len(t)


def confusion_matrix(predictions, truths, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    p = np.asarray(predictions, dtype=np.int64).reshape(-1)
    t = np.asarray(truths, dtype=np.int64).reshape(-1)
    if len(p) != len(t):
        raise ValueError(f"{len(p)} predictions for {len(t)} truths")
    for name, arr in (("prediction", p), ("truth", t)):
        if len(arr) and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} label out of range [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


@dataclass
class EvalReport:
    condition: str
    top1: float
    confusion: np.ndarray
    n_samples: int
    per_class_accuracy: dict  # class index -> accuracy, only for classes present in the test set

    @classmethod
    def from_predictions(cls, condition: str, predictions, truths, num_classes: int) -> "EvalReport":
        if condition not in CONDITIONS:
            raise ValueError(f"unknown condition {condition!r}")
        cm = confusion_matrix(predictions, truths, num_classes)
        n = int(cm.sum())
        if n == 0:
            raise ValueError("empty evaluation set")
        support = cm.sum(axis=1)
        per_class = {int(c): int(cm[c, c]) / int(support[c]) for c in np.flatnonzero(support)}
        top1 = float(Fraction(int(np.trace(cm)), n))
        return cls(condition, top1, cm, n, per_class)

    @property
    def classes(self) -> tuple:
        return tuple(sorted(self.per_class_accuracy))

    def to_dict(self) -> dict:
        return {
            "condition": self.condition,
            "top1": self.top1,
            "n_samples": self.n_samples,
            "num_classes": int(self.confusion.shape[0]),
            "per_class_accuracy": {str(k): v for k, v in sorted(self.per_class_accuracy.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def confusion_csv(self, labels: Sequence[str] | None = None) -> str:
        C = self.confusion.shape[0]
        labels = list(labels) if labels is not None else [str(i) for i in range(C)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred"] + labels)
        for lab, row in zip(labels, self.confusion):
            w.writerow([lab] + [int(v) for v in row])
        return buf.getvalue()

    @classmethod
    def from_json(cls, text: str, confusion: np.ndarray | None = None) -> "EvalReport":
        d = json.loads(text)
        C = d["num_classes"]
        cm = confusion if confusion is not None else np.zeros((C, C), dtype=np.int64)
        return cls(d["condition"], d["top1"], cm, d["n_samples"],
                   {int(k): v for k, v in d["per_class_accuracy"].items()})


def read_confusion_csv(text: str) -> np.ndarray:
    rows = list(csv.reader(io.StringIO(text)))
    return np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)


@dataclass
class ComparisonTable:
    rows: list  # dicts: condition, top1, n_samples, delta_vs_baseline (None without a baseline)

    def to_dict(self) -> dict:
        return {"rows": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [f"{'condition':<22}{'top-1 %':>10}{'delta (pts)':>14}{'n':>8}"]
        for r in self.rows:
            delta = "-" if r["delta_vs_baseline"] is None else f"{100 * r['delta_vs_baseline']:+.2f}"
            lines.append(f"{r['condition']:<22}{100 * r['top1']:>10.2f}{delta:>14}{r['n_samples']:>8}")
        return "\n".join(lines) + "\n"

    def delta(self, condition: str) -> float | None:
        for r in self.rows:
            if r["condition"] == condition:
                return r["delta_vs_baseline"]
        raise KeyError(condition)


def compare_conditions(reports: Sequence[EvalReport]) -> ComparisonTable:
    """Tabulate top-1 per condition with the delta against the voice-only baseline."""
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    ref = reports[0]
    for r in reports[1:]:
        if r.n_samples != ref.n_samples or r.classes != ref.classes:
            raise MismatchedTestSetError(
                f"{r.condition} was evaluated on a different test set than {ref.condition}"
            )
    base = next((r for r in reports if r.condition == BASELINE), None)
    rows = []
    for r in reports:
        delta = None if base is None else round(r.top1 - base.top1, 12)
        rows.append({"condition": r.condition, "top1": r.top1, "n_samples": r.n_samples,
                     "delta_vs_baseline": delta})
    return ComparisonTable(rows)
