"""In-batch contrastive losses over dropout-augmented sentence embeddings.

Rows of a combined batch are interleaved so that rows ``2k`` and ``2k + 1``
(zero-based) are a positive pair; every other row in the batch is a negative.
The per-pair term is NT-Xent: ``-log softmax`` of cosine similarity over
temperature, with the anchor's self-similarity excluded from the denominator.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.1
    weight: float = 0.03

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.weight < 0:
            raise ValueError(f"contrastive weight must be >= 0, got {self.weight}")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def check_batch(x, name: str = "batch") -> torch.Tensor:
    x = _as_tensor(x)
    if x.dim() != 2 or x.shape[0] < 1:
        raise ValueError(f"{name} must be a non-empty N x m matrix, got shape {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains NaN or Inf")
    return x


def cosine_sim(x, y) -> float:
    x, y = _as_tensor(x).flatten(), _as_tensor(y).flatten()
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    nx, ny = torch.linalg.vector_norm(x), torch.linalg.vector_norm(y)
    if nx == 0 or ny == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(torch.dot(x, y) / (nx * ny))


def combine(a, b) -> torch.Tensor:
    """Interleave rows: (a1, b1, a2, b2, ...)."""
    a, b = check_batch(a, "A"), check_batch(b, "B")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.stack((a, b), dim=1).reshape(2 * a.shape[0], a.shape[1])


def in_batch_loss(x, tau: float) -> torch.Tensor:
    x = check_batch(x, "X")
    two_n = x.shape[0]
    if two_n < 2 or two_n % 2:
        raise ValueError(f"need an even number (>= 2) of rows, got {two_n}")
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    norms = torch.linalg.vector_norm(x, dim=1, keepdim=True)
    if (norms == 0).any():
        raise ValueError("cosine similarity is undefined for a zero row")
    z = x / norms
    logits = (z @ z.T) / tau
    eye = torch.eye(two_n, dtype=torch.bool, device=x.device)
    logits = logits.masked_fill(eye, float("-inf"))
    partner = torch.arange(two_n, device=x.device) ^ 1
    return F.cross_entropy(logits, partner)


def internal_loss(q1, q2, tau: float) -> torch.Tensor:
    return in_batch_loss(combine(q1, q2), tau)


def external_loss(q1, q2, target, tau: float) -> torch.Tensor:
    q1, q2, target = check_batch(q1, "Q1"), check_batch(q2, "Q2"), check_batch(target, "T")
    if not (q1.shape == q2.shape == target.shape):
        raise ValueError("Q1, Q2 and T must share one shape")
    return in_batch_loss(combine((q1 + q2) / 2, target), tau)


def contrastive_total(q1, q2, target, tau: float) -> torch.Tensor:
    return internal_loss(q1, q2, tau) + external_loss(q1, q2, target, tau)
