"""Classification and regression metrics with a serializable report.

Counting metrics follow the usual confusion-matrix definitions (per-class
F1 is 0 when its denominator vanishes). AUROC uses the rank statistic with
midrank tie averaging; AUPRC integrates the precision-recall curve
step-wise over distinct thresholds. Multi-class curve metrics are
frequency-weighted one-vs-rest. Undefined values (single-class labels,
zero-variance targets) are reported as None rather than guessed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

CLASSIFICATION_METRICS = ("balanced_accuracy", "weighted_f1",
                          "weighted_auroc", "weighted_auprc")
REGRESSION_METRICS = ("pearson_r", "r2", "rmse")


def balanced_accuracy(labels, predictions) -> float:
    """Mean per-class recall; classes absent from the labels are skipped."""
    labels = np.asarray(labels, dtype=int)
    predictions = np.asarray(predictions, dtype=int)
    if labels.size == 0:
        raise ValueError("empty input")
    if labels.shape != predictions.shape:
        raise ValueError("labels and predictions must have the same length")
    recalls = []
    for c in np.unique(labels):
        mask = labels == c
        recalls.append(np.mean(predictions[mask] == c))
    return float(np.mean(recalls))


def weighted_f1(labels, predictions) -> float:
    """Per-class F1 weighted by class frequency; 0/0 counts as 0."""
    labels = np.asarray(labels, dtype=int)
    predictions = np.asarray(predictions, dtype=int)
    if labels.size == 0:
        raise ValueError("empty input")
    total = labels.size
    out = 0.0
    for c in np.unique(labels):
        tp = np.sum((predictions == c) & (labels == c))
        fp = np.sum((predictions == c) & (labels != c))
        fn = np.sum((predictions != c) & (labels == c))
        denom = 2 * tp + fp + fn
        f1 = 2.0 * tp / denom if denom else 0.0
        out += (np.sum(labels == c) / total) * f1
    return float(out)


def _midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties replaced by their average rank."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size, dtype=np.float64)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc_binary(labels, scores) -> Optional[float]:
    """Rank-statistic AUROC; None when only one class is present."""
    labels = np.asarray(labels, dtype=int)
    scores = np.asarray(scores, dtype=np.float64)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _midranks(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


def auprc_binary(labels, scores) -> Optional[float]:
    """Step-wise area under the precision-recall curve (ties grouped)."""
    labels = np.asarray(labels, dtype=int)
    scores = np.asarray(scores, dtype=np.float64)
    pos = labels == 1
    n_pos = int(pos.sum())
    if n_pos == 0 or n_pos == labels.size:
        return None
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_pos = pos[order].astype(np.float64)
    area = 0.0
    tp = fp = 0.0
    prev_recall = 0.0
    i = 0
    n = labels.size
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        tp += sorted_pos[i:j + 1].sum()
        fp += (j - i + 1) - sorted_pos[i:j + 1].sum()
        recall = tp / n_pos
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return float(area)


def _weighted_ovr(labels, scores, binary_metric) -> Optional[float]:
    labels = np.asarray(labels, dtype=int)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        return binary_metric(labels, scores)
    classes = np.unique(labels)
    if classes.size < 2:
        return None
    total = labels.size
    acc = 0.0
    weight_sum = 0.0
    for c in classes:
        val = binary_metric((labels == c).astype(int), scores[:, c])
        if val is None:
            continue
        w = np.sum(labels == c) / total
        acc += w * val
        weight_sum += w
    return float(acc / weight_sum) if weight_sum else None


def weighted_auroc(labels, scores) -> Optional[float]:
    return _weighted_ovr(labels, scores, auroc_binary)


def weighted_auprc(labels, scores) -> Optional[float]:
    return _weighted_ovr(labels, scores, auprc_binary)


def pearson_r(targets, predictions) -> Optional[float]:
    targets = np.asarray(targets, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    if targets.size < 2:
        raise ValueError("need at least two samples")
    ty = targets - targets.mean()
    py = predictions - predictions.mean()
    denom = np.sqrt((ty * ty).sum() * (py * py).sum())
    if denom < 1e-300:
        return None
    return float((ty * py).sum() / denom)


def r2_score(targets, predictions) -> Optional[float]:
    targets = np.asarray(targets, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    ss_tot = ((targets - targets.mean()) ** 2).sum()
    if ss_tot < 1e-300:
        return None
    ss_res = ((targets - predictions) ** 2).sum()
    return float(1.0 - ss_res / ss_tot)


def rmse(targets, predictions) -> float:
    targets = np.asarray(targets, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    return float(np.sqrt(np.mean((targets - predictions) ** 2)))


def classification_metrics(labels, predictions, scores) -> Dict[str, Optional[float]]:
    return {"balanced_accuracy": balanced_accuracy(labels, predictions),
            "weighted_f1": weighted_f1(labels, predictions),
            "weighted_auroc": weighted_auroc(labels, scores),
            "weighted_auprc": weighted_auprc(labels, scores)}


def regression_metrics(targets, predictions) -> Dict[str, Optional[float]]:
    return {"pearson_r": pearson_r(targets, predictions),
            "r2": r2_score(targets, predictions),
            "rmse": rmse(targets, predictions)}


@dataclass
class EvalReport:
    """Per-seed metric values with mean and (population) std."""
    task: str
    seeds: List[int] = field(default_factory=list)
    per_seed: List[Dict[str, Optional[float]]] = field(default_factory=list)

    def add(self, seed: int, values: Dict[str, Optional[float]]) -> None:
        self.seeds.append(seed)
        self.per_seed.append(dict(values))

    @property
    def metric_names(self):
        return (CLASSIFICATION_METRICS if self.task == "classification"
                else REGRESSION_METRICS)

    def summary(self) -> Dict[str, dict]:
        out = {}
        for name in self.metric_names:
            vals = [d.get(name) for d in self.per_seed]
            present = [v for v in vals if v is not None]
            out[name] = {
                "per_seed": vals,
                "mean": float(np.mean(present)) if present else None,
                "std": float(np.std(present)) if present else None,
            }
        return out

    def to_dict(self) -> dict:
        return {"task": self.task, "seeds": self.seeds,
                "metrics": self.summary()}

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> dict:
        return json.loads(Path(path).read_text())
