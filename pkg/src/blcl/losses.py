"""Cosine-distance contrastive loss with exhaustive pair mining and
homoscedastic-uncertainty weighting of the CE and contrastive terms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F


@dataclass(frozen=True)
class PairBatch:
    anchor_idx: torch.Tensor
    other_idx: torch.Tensor
    is_positive: torch.Tensor

    def __len__(self):
        return int(self.anchor_idx.numel())


def cosine_distance(x1: torch.Tensor, x2: torch.Tensor) -> torch.Tensor:
    """1 - cos(x1, x2) along the last dimension; rejects zero vectors."""
    n1 = torch.linalg.vector_norm(x1, dim=-1)
    n2 = torch.linalg.vector_norm(x2, dim=-1)
    if bool((n1 == 0).any()) or bool((n2 == 0).any()):
        raise ValueError("cosine distance is undefined for zero-norm vectors")
    return 1.0 - (x1 * x2).sum(-1) / (n1 * n2)


def form_pairs(labels) -> PairBatch:
    """All bs(bs+1)/2 unordered pairs of a batch, self-pairs included."""
    labels = torch.as_tensor(labels)
    bs = labels.numel()
    if bs < 1:
        raise ValueError("need at least one sample to form pairs")
    a, b = torch.triu_indices(bs, bs, offset=0, device=labels.device)
    return PairBatch(a, b, labels[a] == labels[b])


def contrastive_loss(embeddings: torch.Tensor, pairs: PairBatch, margin: float = 1.0,
                     squared: bool = False, eps: float | None = None) -> torch.Tensor:
    """Mean over pairs of CD for positives and max(0, margin - CD) for negatives.

    A zero embedding row raises unless ``eps`` is given, in which case norms
    are clamped to ``eps`` (used during training, where a dead ReLU row must
    not abort the run).
    """
    if len(pairs) == 0:
        raise ValueError("contrastive loss needs at least one pair")
    norms = torch.linalg.vector_norm(embeddings, dim=1)
    if eps is None:
        if bool((norms == 0).any()):
            raise ValueError("zero-norm embedding row")
    else:
        norms = norms.clamp_min(eps)
    unit = embeddings / norms.unsqueeze(1)
    dist = 1.0 - (unit[pairs.anchor_idx] * unit[pairs.other_idx]).sum(1)
    pos = dist
    neg = torch.clamp(margin - dist, min=0.0)
    if squared:
        pos, neg = pos.pow(2), neg.pow(2)
    return torch.where(pairs.is_positive, pos, neg).mean()


def cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    if logits.shape[1] < 2:
        raise ValueError("cross entropy needs at least two classes")
    return F.cross_entropy(logits, torch.as_tensor(labels, device=logits.device))


class LossWeights(nn.Module):
    """Trainable log-noise scales; sigma starts at 1 (log sigma = 0)."""

    def __init__(self, log_sigma1: float = 0.0, log_sigma2: float = 0.0):
        super().__init__()
        self.log_sigma1 = nn.Parameter(torch.tensor(float(log_sigma1), dtype=torch.float64))
        self.log_sigma2 = nn.Parameter(torch.tensor(float(log_sigma2), dtype=torch.float64))

    @property
    def sigma1(self) -> float:
        return math.exp(self.log_sigma1.item())

    @property
    def sigma2(self) -> float:
        return math.exp(self.log_sigma2.item())


def bayesian_total_loss(l_ce, l_cl, weights: LossWeights) -> torch.Tensor:
    """l_ce / (2 s1^2) + l_cl / (2 s2^2) + log s1 + log s2."""
    l_ce = torch.as_tensor(l_ce, dtype=torch.float64)
    l_cl = torch.as_tensor(l_cl, dtype=torch.float64)
    if not (torch.isfinite(l_ce) and torch.isfinite(l_cl)):
        raise ValueError("losses must be finite")
    s1, s2 = weights.log_sigma1, weights.log_sigma2
    return (0.5 * torch.exp(-2 * s1) * l_ce + 0.5 * torch.exp(-2 * s2) * l_cl + s1 + s2)


def optimal_sigma(loss: float) -> float:
    """Minimizer sqrt(l) of l / (2 s^2) + log s."""
    if not loss > 0:
        raise ValueError("optimal sigma needs a positive loss")
    return math.sqrt(loss)
