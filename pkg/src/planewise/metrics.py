"""Evaluation: accuracy, per-class precision/recall/F1, macro F1, confusion
matrices, and 2-D embedding export for domain-gap inspection.

Class order everywhere is (glioma, meningioma, pituitary); confusion rows are
true classes, columns predicted. Per-class F1 uses the convention F1 = 0 when
precision + recall = 0, which keeps macro F1 defined for absent classes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import Domain, Orientation, TumorClass

N_CLASSES = 3


class MetricsError(ValueError):
    """Raised on empty or mismatched evaluation inputs."""


@dataclass
class ConfusionMatrix:
    """3x3 count matrix; rows = true class, columns = predicted class."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (N_CLASSES, N_CLASSES):
            raise MetricsError(f"confusion matrix must be 3x3, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise MetricsError("confusion matrix counts must be non-negative")

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


@dataclass
class MetricsReport:
    accuracy: float
    per_class: dict[TumorClass, tuple[float, float, float]]  # precision, recall, F1
    macro_f1: float
    confusion: ConfusionMatrix
    n: int
    tags: dict[str, str] = field(default_factory=dict)
    # Simple mean of per-orientation macro F1 values; only set on aggregated
    # reports, alongside the pooled macro_f1 recomputed from summed counts.
    macro_f1_simple_mean: float | None = None


def _as_index(label) -> int:
    if isinstance(label, TumorClass):
        return label.value
    i = int(label)
    if not 0 <= i < N_CLASSES:
        raise MetricsError(f"class index {i} out of range")
    return i


def compute_metrics(
    true_labels: Sequence,
    predicted_labels: Sequence,
    tags: Mapping[str, str] | None = None,
) -> MetricsReport:
    """Score predictions against ground truth.

    Accepts TumorClass values or integer indices. Accuracy is trace / n; macro
    F1 is the unweighted mean of the three per-class F1 values.
    """
    if len(true_labels) == 0:
        raise MetricsError("empty label list")
    if len(true_labels) != len(predicted_labels):
        raise MetricsError(
            f"length mismatch: {len(true_labels)} true vs {len(predicted_labels)} predicted"
        )
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for t, p in zip(true_labels, predicted_labels):
        counts[_as_index(t), _as_index(p)] += 1
    return _report_from_confusion(ConfusionMatrix(counts), dict(tags or {}))


def _report_from_confusion(confusion: ConfusionMatrix, tags: dict[str, str]) -> MetricsReport:
    counts = confusion.counts
    n = confusion.n
    accuracy = float(np.trace(counts)) / n
    per_class: dict[TumorClass, tuple[float, float, float]] = {}
    f1s = []
    for cls in TumorClass:
        c = cls.value
        tp = float(counts[c, c])
        predicted = float(counts[:, c].sum())
        actual = float(counts[c, :].sum())
        precision = tp / predicted if predicted > 0 else 0.0
        recall = tp / actual if actual > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        per_class[cls] = (precision, recall, f1)
        f1s.append(f1)
    return MetricsReport(
        accuracy=accuracy,
        per_class=per_class,
        macro_f1=float(np.mean(f1s)),
        confusion=confusion,
        n=n,
        tags=tags,
    )


def aggregate_orientation_reports(
    reports: Mapping[Orientation, MetricsReport],
) -> MetricsReport:
    """Pool three per-orientation reports.

    The pooled confusion matrix is the cellwise sum and pooled metrics are
    recomputed from it. The simple (unweighted) mean of the three macro F1
    values is emitted as well, since per-orientation averages are conventionally
    reported that way.
    """
    missing = [o.name for o in Orientation if o not in reports]
    if missing:
        raise MetricsError(f"missing orientation report(s): {', '.join(missing)}")
    pooled = ConfusionMatrix(np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64))
    for o in Orientation:
        pooled = pooled + reports[o].confusion
    out = _report_from_confusion(pooled, {"scope": "pooled"})
    out.macro_f1_simple_mean = float(np.mean([reports[o].macro_f1 for o in Orientation]))
    return out


def report_to_dict(report: MetricsReport) -> dict:
    d = {
        "accuracy": report.accuracy,
        "macro_f1": report.macro_f1,
        "n": report.n,
        "per_class": {
            cls.name.lower(): {
                "precision": report.per_class[cls][0],
                "recall": report.per_class[cls][1],
                "f1": report.per_class[cls][2],
            }
            for cls in TumorClass
        },
        "confusion": report.confusion.counts.tolist(),
        "tags": report.tags,
    }
    if report.macro_f1_simple_mean is not None:
        d["macro_f1_simple_mean"] = report.macro_f1_simple_mean
    return d


def save_report_json(report: MetricsReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report_to_dict(report), f, indent=2, sort_keys=True)
        f.write("\n")


def save_confusion_csv(confusion: ConfusionMatrix, path: str | Path) -> None:
    """Write the 3x3 matrix as CSV with a header row and true-class row labels."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = [cls.name.lower() for cls in TumorClass]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["true\\pred"] + names)
        for cls in TumorClass:
            writer.writerow([names[cls.value]] + [int(x) for x in confusion.counts[cls.value]])


def export_embedding_2d(
    features: np.ndarray,
    domain_tags: Sequence[Domain | str],
    out_path: str | Path,
    ids: Sequence[str] | None = None,
    seed: int = 0,
) -> Path:
    """Project features to 2-D with t-SNE and write ``id,domain,x,y`` CSV.

    Perplexity is min(30, (n - 1) / 3); the embedding runs for 1000 iterations
    with a fixed seed, so repeated calls on identical input produce identical
    files.
    """
    from sklearn.manifold import TSNE

    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if n < 5:
        raise MetricsError(f"embedding needs at least 5 points, got {n}")
    if len(domain_tags) != n:
        raise MetricsError("domain_tags length must match feature rows")
    if ids is None:
        ids = [str(i) for i in range(n)]

    perplexity = min(30.0, (n - 1) / 3.0)
    # Degenerate all-identical input has no neighborhood structure; t-SNE's
    # conditional probabilities are undefined there, so emit a deterministic
    # zero layout instead.
    if np.ptp(features, axis=0).max() == 0.0:
        coords = np.zeros((n, 2))
    else:
        tsne = TSNE(
            n_components=2,
            perplexity=perplexity,
            max_iter=1000,
            init="pca",
            random_state=seed,
            n_jobs=1,
        )
        coords = tsne.fit_transform(features)

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["id", "domain", "x", "y"])
        for i in range(n):
            tag = domain_tags[i]
            name = tag.value if isinstance(tag, Domain) else str(tag)
            writer.writerow([ids[i], name, repr(float(coords[i, 0])), repr(float(coords[i, 1]))])
    return out_path
