"""Distillation objectives: cosine alignment, in-batch InfoNCE, listwise rank KL."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError
from .tensor import Tensor, log_softmax


@dataclass(frozen=True)
class LossWeights:
    align: float = 0.5
    contra: float = 0.5
    rank: float = 0.5
    tau: float = 0.05
    tau_r: float = 0.05

    def __post_init__(self):
        if min(self.align, self.contra, self.rank) < 0:
            raise ConfigurationError(f"loss weights must be non-negative: {self}")
        if max(self.align, self.contra, self.rank) <= 0:
            raise ConfigurationError("at least one loss weight must be positive")
        if self.tau <= 0 or self.tau_r <= 0:
            raise ConfigurationError(f"temperatures must be positive: tau={self.tau}, tau_r={self.tau_r}")


@dataclass
class LossBreakdown:
    align: float
    contra: float
    rank: float
    total: float
    graph: Tensor | None = field(default=None, repr=False, compare=False)

    @classmethod
    def combine(cls, align: float, contra: float, rank: float, weights: LossWeights) -> LossBreakdown:
        total = weights.align * align + weights.contra * contra + weights.rank * rank
        return cls(align, contra, rank, total)


def _batch(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    return t.reshape(1, -1) if t.ndim == 1 else t


def alignment_loss(pred, teacher) -> Tensor:
    """``1 - mean cosine`` between unit predictions and unit teacher vectors."""
    pred = _batch(pred)
    teacher = np.atleast_2d(np.asarray(teacher, dtype=pred.dtype))
    if pred.shape != teacher.shape:
        raise ContractError(f"alignment_loss: pred {pred.shape} vs teacher {teacher.shape}")
    return 1.0 - (pred * teacher).sum(axis=-1).mean()


def contrastive_loss(pred, teacher, tau: float = 0.05) -> Tensor:
    """In-batch InfoNCE: each prediction must pick its own teacher among the batch's teachers."""
    if tau <= 0:
        raise ConfigurationError(f"contrastive temperature must be positive, got {tau}")
    pred = _batch(pred)
    teacher = np.atleast_2d(np.asarray(teacher, dtype=pred.dtype))
    if pred.shape != teacher.shape:
        raise ContractError(f"contrastive_loss: pred {pred.shape} vs teacher {teacher.shape}")
    b = pred.shape[0]
    logits = (pred @ teacher.T) * (1.0 / tau)
    diag = np.eye(b, dtype=pred.dtype)
    return -(log_softmax(logits, axis=-1) * diag).sum() * (1.0 / b)


def rank_distill_loss(pred, candidates, teacher_scores, tau_r: float = 0.05) -> Tensor:
    """KL(teacher ranking || student ranking) over each query's candidate documents.

    Shapes: ``pred`` [d] or [B, d]; ``candidates`` [K, d] or [B, K, d];
    ``teacher_scores`` [K] or [B, K]. Batched losses are averaged over queries.
    """
    if tau_r <= 0:
        raise ConfigurationError(f"rank temperature must be positive, got {tau_r}")
    pred = _batch(pred)
    cand = np.asarray(candidates, dtype=pred.dtype)
    scores = np.asarray(teacher_scores, dtype=np.float64)
    if cand.ndim == 2:
        cand = cand[None]
    if scores.ndim == 1:
        scores = scores[None]
    b, d = pred.shape
    if cand.shape[0] != b or cand.shape[2] != d or scores.shape != cand.shape[:2]:
        raise ContractError(
            f"rank_distill_loss: pred {pred.shape}, candidates {cand.shape}, scores {scores.shape}"
        )
    k = cand.shape[1]
    if k < 2:
        raise ConfigurationError(f"rank distillation needs K >= 2 candidates, got {k}")

    z = scores / tau_r
    z = z - z.max(axis=-1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(log_p)
    entropy_term = float((p * log_p).sum() / b)

    student = (pred.reshape(b, 1, d) @ np.swapaxes(cand, -1, -2)).reshape(b, k)
    log_q = log_softmax(student * (1.0 / tau_r), axis=-1)
    return entropy_term - (log_q * p.astype(pred.dtype)).sum() * (1.0 / b)


def combined_loss(pred, teacher, candidates, teacher_scores, weights: LossWeights) -> LossBreakdown:
    """Weighted sum of the three objectives; components with zero weight are skipped."""
    if weights.rank > 0 and (candidates is None or teacher_scores is None):
        raise ConfigurationError("rank weight > 0 requires candidate documents and teacher scores")
    terms = []
    parts = {"align": 0.0, "contra": 0.0, "rank": 0.0}
    if weights.align > 0:
        t = alignment_loss(pred, teacher)
        parts["align"] = t.item()
        terms.append(t * weights.align)
    if weights.contra > 0:
        t = contrastive_loss(pred, teacher, weights.tau)
        parts["contra"] = t.item()
        terms.append(t * weights.contra)
    if weights.rank > 0:
        t = rank_distill_loss(pred, candidates, teacher_scores, weights.tau_r)
        parts["rank"] = t.item()
        terms.append(t * weights.rank)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    out = LossBreakdown.combine(parts["align"], parts["contra"], parts["rank"], weights)
    out.graph = total
    return out
