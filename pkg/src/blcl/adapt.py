"""Similarity-gated reduction of the final specialized block."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Mapping

import torch

from blcl.backbone import BlockSpec, BLCLNet

logger = logging.getLogger(__name__)

# accuracy drop (in points) versus the best spec so far that counts as a decline
DECLINE_TOLERANCE = 0.2


@dataclass(frozen=True)
class SimilarityReport:
    per_new_class: dict[int, float]
    aggregate: float


@dataclass(frozen=True)
class SpecDecision:
    spec: BlockSpec
    aggregate: float
    tau: float
    probed: dict[int, float]

    def to_dict(self):
        return {"aggregate": self.aggregate, "tau": self.tau, "chosen": self.spec.conv_layers,
                "probed": {str(k): v for k, v in self.probed.items()}}


@torch.no_grad()
def embed_batches(model: BLCLNet, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Embeddings in inference mode; restores the previous train/eval mode."""
    was_training = model.training
    device = next(model.parameters()).device
    model.eval()
    try:
        out = [model.embed(images[i:i + batch_size].to(device)).cpu() for i in range(0, len(images), batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(out)


def prototypes_from_embeddings(embeddings_by_class: Mapping[int, torch.Tensor]) -> dict[int, torch.Tensor]:
    out = {}
    for c, emb in embeddings_by_class.items():
        if len(emb) == 0:
            raise ValueError(f"class {c} has no samples")
        out[c] = torch.as_tensor(emb, dtype=torch.float64).mean(0)
    return out


def class_prototypes(model: BLCLNet, samples_by_class: Mapping[int, torch.Tensor]) -> dict[int, torch.Tensor]:
    """Mean inference-mode embedding per class; values are N x C x H x W image tensors."""
    for c, x in samples_by_class.items():
        if len(x) == 0:
            raise ValueError(f"class {c} has no samples")
    return prototypes_from_embeddings({c: embed_batches(model, x) for c, x in samples_by_class.items()})


def class_similarity(new_protos: Mapping[int, torch.Tensor], old_protos: Mapping[int, torch.Tensor]) -> SimilarityReport:
    if not new_protos or not old_protos:
        raise ValueError("need at least one new and one old prototype")
    old_keys = sorted(old_protos)
    old = torch.stack([torch.as_tensor(old_protos[c], dtype=torch.float64) for c in old_keys])
    old_norm = torch.linalg.vector_norm(old, dim=1)
    if bool((old_norm == 0).any()):
        raise ValueError("zero-norm prototype")
    old = old / old_norm[:, None]
    per_class = {}
    for c in sorted(new_protos):
        v = torch.as_tensor(new_protos[c], dtype=torch.float64)
        n = torch.linalg.vector_norm(v)
        if n == 0:
            raise ValueError(f"zero-norm prototype for class {c}")
        per_class[c] = float(torch.clamp(old @ (v / n), -1.0, 1.0).max())
    return SimilarityReport(per_class, sum(per_class.values()) / len(per_class))


def decide_block_spec(
    report: SimilarityReport,
    tau: float,
    full: int,
    probe: Callable[[BlockSpec], float] | None = None,
    tolerance: float = DECLINE_TOLERANCE,
) -> SpecDecision:
    """Pick the final-region conv count for a task.

    Dissimilar classes (aggregate <= tau) keep ``full`` convs. Similar ones
    drop one conv, or, given ``probe`` (spec -> accuracy in percent), drop
    convs one at a time from ``full`` until accuracy falls more than
    ``tolerance`` below the best seen, returning the last spec before the fall.
    """
    if not -1.0 < tau <= 1.0:
        raise ValueError("tau must lie in (-1, 1]")
    if full < 0:
        raise ValueError("full must be >= 0")
    probed: dict[int, float] = {}
    if report.aggregate <= tau:
        chosen = full
    elif probe is None:
        chosen = max(full - 1, 0)
    else:
        chosen = full
        best = probed[full] = float(probe(BlockSpec(full)))
        for n in range(full - 1, -1, -1):
            acc = probed[n] = float(probe(BlockSpec(n)))
            if acc < best - tolerance:
                break
            chosen = n
            best = max(best, acc)
    decision = SpecDecision(BlockSpec(chosen), report.aggregate, tau, probed)
    logger.info("similarity %.4f (tau %.2f) probed %s -> spec %d", report.aggregate, tau, probed, chosen)
    return decision
