"""Accuracy, macro F-beta, confusion matrices and cluster-validity indices."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


def confusion_matrix(preds, labels, k: int) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    for name, arr in (("pred", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"{name} out of range [0, {k})")
    out = np.zeros((k, k), dtype=np.int64)
    np.add.at(out, (labels, preds), 1)
    return out


def accuracy(confusion) -> float:
    confusion = np.asarray(confusion)
    total = confusion.sum()
    if confusion.size == 0 or total == 0:
        raise ValueError("empty confusion matrix")
    return float(100.0 * np.trace(confusion) / total)


def average_accuracy(values: Sequence[float]) -> float:
    if len(values) == 0:
        raise ValueError("no accuracies to average")
    return float(np.mean(values))


def f_beta(confusion, beta: float) -> float:
    """Macro F-beta over all K classes; a class with P = R = 0 scores 0."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    c = np.asarray(confusion, dtype=np.float64)
    tp = np.diag(c)
    predicted = c.sum(axis=0)
    support = c.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    b2 = beta * beta
    denom = b2 * precision + recall
    scores = np.divide((1 + b2) * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(scores.mean())


def _clusters(embeddings, labels):
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("need at least two clusters")
    return x, labels, classes


def davies_bouldin_ratios(embeddings, labels) -> np.ndarray:
    """Pairwise (s_i + s_j) / d_ij matrix (diagonal nan, inf where centroids coincide)."""
    x, labels, classes = _clusters(embeddings, labels)
    centroids = np.stack([x[labels == c].mean(0) for c in classes])
    spread = np.array([np.linalg.norm(x[labels == c] - centroids[i], axis=1).mean()
                       for i, c in enumerate(classes)])
    dist = np.linalg.norm(centroids[:, None, :] - centroids[None, :, :], axis=2)
    num = spread[:, None] + spread[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(dist > 0, num / np.where(dist > 0, dist, 1.0), np.inf)
    np.fill_diagonal(ratios, np.nan)
    return ratios


def davies_bouldin(embeddings, labels) -> float:
    """Mean over clusters of the worst (s_i + s_j) / d_ij; inf if two centroids coincide."""
    ratios = davies_bouldin_ratios(embeddings, labels)
    return float(np.nanmax(ratios, axis=1).mean())


def calinski_harabasz(embeddings, labels) -> float:
    """[B / (k - 1)] / [W / (N - k)]; inf when every point sits on its centroid."""
    x, labels, classes = _clusters(embeddings, labels)
    n, k = len(x), len(classes)
    if k >= n:
        return math.inf
    mean = x.mean(0)
    between = within = 0.0
    for c in classes:
        members = x[labels == c]
        centroid = members.mean(0)
        between += len(members) * float(np.sum((centroid - mean) ** 2))
        within += float(np.sum((members - centroid) ** 2))
    if within == 0:
        return math.inf
    return (between / (k - 1)) / (within / (n - k))


def _finite_or_flag(value, fallback):
    if math.isfinite(value):
        return {"value": value, "infinite": False}
    return {"value": None, "infinite": True, "largest_finite": fallback}


@dataclass
class MetricsReport:
    per_task_acc: list[float]
    avg_acc: float
    f1: float
    f2: float
    confusion: list[list[int]]
    db_score: float
    ch_score: float
    labels: list[int] = field(default_factory=list)
    db_largest_finite: float | None = None
    ch_largest_finite: float | None = None

    def to_dict(self):
        d = asdict(self)
        d["db_score"] = _finite_or_flag(self.db_score, self.db_largest_finite)
        d["ch_score"] = _finite_or_flag(self.ch_score, self.ch_largest_finite)
        d.pop("db_largest_finite")
        d.pop("ch_largest_finite")
        return d

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.json").write_text(json.dumps(self.to_dict(), indent=2))
        write_confusion_csv(self.confusion, out_dir / "confusion.csv", self.labels or None)


def cluster_scores(embeddings, labels) -> dict:
    db_ratios = davies_bouldin_ratios(embeddings, labels)
    db = float(np.nanmax(db_ratios, axis=1).mean())
    finite = db_ratios[np.isfinite(db_ratios)]
    ch = calinski_harabasz(embeddings, labels)
    ch_fallback = None
    if not math.isfinite(ch):
        x, lab, classes = _clusters(embeddings, labels)
        mean = x.mean(0)
        ch_fallback = sum(
            (lab == c).sum() * float(np.sum((x[lab == c].mean(0) - mean) ** 2)) for c in classes
        ) / (len(classes) - 1)
    return {
        "db": db,
        "db_largest_finite": float(finite.max()) if finite.size and not math.isfinite(db) else None,
        "ch": ch,
        "ch_largest_finite": ch_fallback,
    }


def build_report(per_task_acc, preds, labels, class_ids, embeddings) -> MetricsReport:
    """Report for a final evaluation; ``class_ids`` fixes the confusion row order."""
    index = {c: i for i, c in enumerate(class_ids)}
    conf = confusion_matrix([index[p] for p in preds], [index[y] for y in labels], len(class_ids))
    scores = cluster_scores(embeddings, labels)
    return MetricsReport(
        per_task_acc=[float(a) for a in per_task_acc],
        avg_acc=average_accuracy(per_task_acc),
        f1=f_beta(conf, 1.0),
        f2=f_beta(conf, 2.0),
        confusion=conf.tolist(),
        db_score=scores["db"],
        ch_score=scores["ch"],
        labels=list(class_ids),
        db_largest_finite=scores["db_largest_finite"],
        ch_largest_finite=scores["ch_largest_finite"],
    )


def write_confusion_csv(confusion, path, class_ids=None) -> None:
    confusion = np.asarray(confusion)
    class_ids = list(class_ids) if class_ids is not None else list(range(len(confusion)))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *class_ids])
        for c, row in zip(class_ids, confusion):
            w.writerow([c, *row.tolist()])


def write_embeddings_csv(ids, labels, embeddings, path) -> None:
    embeddings = np.asarray(embeddings)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label", *[f"e{i}" for i in range(embeddings.shape[1])]])
        for sid, y, row in zip(ids, labels, embeddings):
            w.writerow([sid, int(y), *(repr(float(v)) for v in row)])


def read_embeddings_csv(path):
    ids, labels, rows = [], [], []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for rec in r:
            ids.append(rec[0])
            labels.append(int(rec[1]))
            rows.append([float(v) for v in rec[2:]])
    return ids, np.asarray(labels), np.asarray(rows, dtype=np.float64)
