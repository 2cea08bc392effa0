"""Model-side evaluation: predictions, embeddings and per-task accuracy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from blcl.backbone import BLCLNet
from blcl.data import LabeledImage, TaskSequence, batch_iterator
from blcl.metrics import MetricsReport, accuracy, build_report, confusion_matrix, write_embeddings_csv


@dataclass
class Predictions:
    ids: list[str]
    labels: np.ndarray  # dataset class ids
    preds: np.ndarray  # dataset class ids
    embeddings: np.ndarray


@torch.no_grad()
def predict(model: BLCLNet, samples: Sequence[LabeledImage], class_ids: Sequence[int],
            batch_size: int = 256) -> Predictions:
    """Run in inference mode; head column j is mapped back to ``class_ids[j]``."""
    was_training = model.training
    model.eval()
    lookup = np.asarray(class_ids)
    device = next(model.parameters()).device
    preds, embs = [], []
    try:
        for x, _ in batch_iterator(samples, batch_size):
            logits, emb = model(x.to(device))
            preds.append(logits.argmax(1).cpu().numpy())
            embs.append(emb.cpu().numpy())
    finally:
        model.train(was_training)
    return Predictions(
        ids=[s.id for s in samples],
        labels=np.asarray([s.label for s in samples]),
        preds=lookup[np.concatenate(preds)] if preds else np.zeros(0, dtype=int),
        embeddings=np.concatenate(embs) if embs else np.zeros((0, 512), dtype=np.float32),
    )


def export_embeddings(model: BLCLNet, samples: Sequence[LabeledImage], path=None):
    """(ids, labels, N x 512 embeddings); also written as CSV when ``path`` is given."""
    p = predict(model, samples, range(model.num_classes))
    if path is not None:
        write_embeddings_csv(p.ids, p.labels, p.embeddings, path)
    return p.ids, p.labels, p.embeddings


def class_group_accuracy(p: Predictions, classes: Sequence[int]) -> float:
    """Accuracy (percent) restricted to test samples whose label is in ``classes``."""
    mask = np.isin(p.labels, list(classes))
    if not mask.any():
        raise ValueError("no samples for the requested classes")
    return 100.0 * float((p.preds[mask] == p.labels[mask]).mean())


def evaluate_after_task(model: BLCLNet, seq: TaskSequence, t: int) -> tuple[float, list[float], Predictions]:
    """Cumulative accuracy after task t, accuracy per seen task's classes, raw predictions."""
    class_ids = seq.cumulative_labels(t)
    p = predict(model, seq.test_samples(t), class_ids)
    index = {c: i for i, c in enumerate(class_ids)}
    conf = confusion_matrix([index[v] for v in p.preds], [index[v] for v in p.labels], len(class_ids))
    per_group = [class_group_accuracy(p, seq.task(j).classes) for j in range(1, t + 1)]
    return accuracy(conf), per_group, p


def final_report(per_task_acc: Sequence[float], p: Predictions, class_ids: Sequence[int]) -> MetricsReport:
    return build_report(per_task_acc, p.preds.tolist(), p.labels.tolist(), class_ids, p.embeddings)
