"""Fixed-budget exemplar memory with herding selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class ExemplarSet:
    budget: int = 2000
    per_class: dict[int, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError("budget must be non-negative")

    def __len__(self):
        return sum(len(v) for v in self.per_class.values())

    @property
    def classes(self) -> list[int]:
        return sorted(self.per_class)

    def ids(self) -> list[str]:
        return [sid for c in self.classes for sid in self.per_class[c]]

    def to_dict(self):
        return {"budget": self.budget, "per_class": {str(k): list(v) for k, v in self.per_class.items()}}

    @classmethod
    def from_dict(cls, d):
        return cls(d["budget"], {int(k): list(v) for k, v in d["per_class"].items()})


def herding_select(features: np.ndarray, m: int) -> list[int]:
    """Greedy herding: each step adds the unused row that brings the running
    mean of the selection closest (Euclidean) to the mean of all rows."""
    features = np.asarray(features, dtype=np.float64)
    n = len(features)
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= {n}, got m={m}")
    target = features.mean(axis=0)
    running = np.zeros_like(target)
    available = np.ones(n, dtype=bool)
    chosen: list[int] = []
    for k in range(1, m + 1):
        candidate_means = (running + features) / k
        dist = np.linalg.norm(candidate_means - target, axis=1)
        dist[~available] = np.inf
        i = int(np.argmin(dist))  # first minimum: ties go to the lowest index
        chosen.append(i)
        available[i] = False
        running += features[i]
    return chosen


def per_class_quota(budget: int, num_classes: int) -> int:
    return budget // num_classes if num_classes else 0


def update_exemplars(
    task_index: int,
    store: ExemplarSet,
    new_class_features: Mapping[int, tuple[Sequence[str], np.ndarray]],
) -> ExemplarSet:
    """Shrink old classes and herd new ones so every class holds budget // k ids.

    ``new_class_features`` maps class id -> (sample ids, feature rows). Old
    classes keep a prefix of their herding-ordered list.
    """
    overlap = set(new_class_features) & set(store.per_class)
    if overlap:
        raise ValueError(f"classes already stored: {sorted(overlap)}")
    k = len(store.per_class) + len(new_class_features)
    m = per_class_quota(store.budget, k)
    out = ExemplarSet(store.budget)
    for c in store.classes:
        out.per_class[c] = store.per_class[c][:m]
    for c in sorted(new_class_features):
        ids, feats = new_class_features[c]
        if len(ids) != len(feats):
            raise ValueError(f"class {c}: {len(ids)} ids for {len(feats)} feature rows")
        take = min(m, len(ids))
        if take < m:
            logger.info("task %d: class %d has %d samples, fewer than quota %d", task_index, c, len(ids), m)
        out.per_class[c] = [ids[i] for i in herding_select(feats, take)] if take else []
    assert len(out) <= out.budget
    return out


def write_manifest(store: ExemplarSet, path) -> None:
    lines = ["class_id,sample_id,herding_rank"]
    for c in store.classes:
        lines += [f"{c},{sid},{rank}" for rank, sid in enumerate(store.per_class[c])]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path, budget: int = 2000) -> ExemplarSet:
    store = ExemplarSet(budget)
    rows = Path(path).read_text().splitlines()[1:]
    parsed = []
    for row in filter(None, rows):
        c, rest = row.split(",", 1)
        sid, rank = rest.rsplit(",", 1)
        parsed.append((int(c), int(rank), sid))
    for c, _, sid in sorted(parsed):
        store.per_class.setdefault(c, []).append(sid)
    return store
