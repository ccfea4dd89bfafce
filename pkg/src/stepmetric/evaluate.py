"""Experiment metrics: confusion matrices, accuracy, adjacency errors,
threshold sweeps, and raw embedding export.

The adjacent-misclassification rate counts step-labeled images predicted
as the immediately preceding or succeeding step, over all step-labeled
truths; error-labeled truths are excluded from both sides since rejection
quality is reported separately (error recall / false-error rate).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embednet import Parameters, embed_batch
from .inference import Gallery, PredictionResult, knn_classify
from .labels import ERROR_LABEL, LabeledImage, is_step_label, step_index


@dataclass
class ConfusionMatrix:
    labels: list[str]
    counts: np.ndarray  # (L, L) int64, rows = truth, columns = predicted

    @staticmethod
    def empty(labels: list[str]) -> "ConfusionMatrix":
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate labels")
        return ConfusionMatrix(list(labels), np.zeros((len(labels), len(labels)), dtype=np.int64))

    @staticmethod
    def from_pairs(pairs, labels: list[str]) -> "ConfusionMatrix":
        cm = ConfusionMatrix.empty(labels)
        for truth, predicted in pairs:
            cm.add(truth, predicted)
        return cm

    def _index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise ValueError(f"label {label!r} is not in the configured label set {self.labels}") from None

    def add(self, truth: str, predicted: str) -> None:
        self.counts[self._index(truth), self._index(predicted)] += 1

    def total(self) -> int:
        return int(self.counts.sum())

    def normalized(self) -> np.ndarray:
        """Row-stochastic view; all-zero rows stay all-zero."""
        out = self.counts.astype(np.float64)
        sums = out.sum(axis=1, keepdims=True)
        np.divide(out, sums, out=out, where=sums > 0)
        return out

    def to_csv(self, path: Path | str, normalized: bool = False) -> None:
        grid = self.normalized() if normalized else self.counts
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["truth\\predicted"] + self.labels)
            for label, row in zip(self.labels, grid):
                writer.writerow([label] + [repr(float(v)) if normalized else int(v) for v in row])


def overall_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total()
    if total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm.counts)) / total


def adjacent_misclassification_rate(cm: ConfusionMatrix) -> float:
    """Fraction of step-labeled truths predicted as a step one away."""
    step_rows = [(i, step_index(l)) for i, l in enumerate(cm.labels) if is_step_label(l)]
    denominator = int(sum(cm.counts[i].sum() for i, _ in step_rows))
    if denominator == 0:
        raise ValueError("no step-labeled truths in the matrix")
    numerator = 0
    for i, si in step_rows:
        for j, sj in step_rows:
            if abs(si - sj) == 1:
                numerator += int(cm.counts[i, j])
    return numerator / denominator


@dataclass
class SweepRow:
    threshold: float
    accuracy: float
    error_recall: float
    false_error_rate: float
    adjacent_rate: float


@dataclass
class SweepReport:
    rows: list[SweepRow] = field(default_factory=list)

    def best_by_accuracy(self) -> SweepRow:
        return max(self.rows, key=lambda r: r.accuracy)

    def to_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="") as f:
            f.write("threshold,accuracy,error_recall,false_error_rate,adjacent_rate\n")
            for r in self.rows:
                f.write(f"{r.threshold!r},{r.accuracy!r},{r.error_recall!r},{r.false_error_rate!r},{r.adjacent_rate!r}\n")


def predict_images(
    params: Parameters,
    gallery: Gallery,
    images: list[LabeledImage],
    k: int,
    threshold: float | None = None,
) -> list[tuple[str, PredictionResult]]:
    """Classify a list of images; returns (truth label, result) pairs."""
    emb = embed_batch(params, images).astype(np.float64)
    out = []
    for row, im in zip(emb, images):
        out.append((im.label, knn_classify(gallery, row, k=k, threshold=threshold)))
    return out


def confusion_from_predictions(pairs: list[tuple[str, PredictionResult]], labels: list[str]) -> ConfusionMatrix:
    return ConfusionMatrix.from_pairs([(t, r.predicted) for t, r in pairs], labels)


def threshold_sweep(
    params: Parameters,
    gallery: Gallery,
    test_images: list[LabeledImage],
    k: int,
    thresholds: list[float],
    labels: list[str],
) -> SweepReport:
    """Metrics per rejection threshold; images are embedded only once.

    Thresholds must be strictly increasing. Raising the threshold can
    only turn error predictions back into step predictions, so error
    recall and false-error rate are both nonincreasing along the rows.
    """
    if not thresholds:
        raise ValueError("no thresholds given")
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly increasing")
    base = predict_images(params, gallery, test_images, k=k, threshold=None)
    truths = [t for t, _ in base]
    vote_preds = [r.predicted for _, r in base]
    means = np.array([r.mean_knn_distance for _, r in base])
    is_error_truth = np.array([t == ERROR_LABEL for t in truths])
    n_error = int(is_error_truth.sum())
    n_clean = len(truths) - n_error

    report = SweepReport()
    for th in thresholds:
        rejected = means > th
        preds = [ERROR_LABEL if rej else vp for vp, rej in zip(vote_preds, rejected)]
        cm = ConfusionMatrix.from_pairs(zip(truths, preds), labels)
        acc = overall_accuracy(cm)
        err_recall = float((rejected & is_error_truth).sum() / n_error) if n_error else 0.0
        false_err = float((rejected & ~is_error_truth).sum() / n_clean) if n_clean else 0.0
        adjacent = adjacent_misclassification_rate(cm) if n_clean else 0.0
        report.rows.append(SweepRow(float(th), acc, err_recall, false_err, adjacent))
    return report


def export_embeddings(params: Parameters, images: list[LabeledImage], path: Path | str) -> None:
    """CSV of id,label,v_0..v_{D-1} with full-precision decimal values."""
    emb = embed_batch(params, images).astype(np.float64)
    dim = params.arch.embed_dim
    with open(path, "w", newline="") as f:
        f.write("id,label," + ",".join(f"v_{i}" for i in range(dim)) + "\n")
        for im, row in zip(images, emb):
            f.write(f"{im.id},{im.label}," + ",".join(repr(float(v)) for v in row) + "\n")


def summary_text(
    cm: ConfusionMatrix,
    threshold: float | None,
    extra_lines: list[str] | None = None,
) -> str:
    lines = [
        f"images evaluated: {cm.total()}",
        f"overall accuracy: {overall_accuracy(cm):.4f}",
        f"adjacent-step misclassification rate: {adjacent_misclassification_rate(cm):.4f}",
        f"rejection threshold: {threshold if threshold is not None else 'none'}",
    ]
    if extra_lines:
        lines.extend(extra_lines)
    return "\n".join(lines) + "\n"
