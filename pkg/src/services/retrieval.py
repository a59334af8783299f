import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator

from src.config.run_config import TauConfig
from src.services.numerics import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    cross_entropy,
    l2_normalize,
    matmul,
    mean,
    mul,
    scale,
    transpose,
)

logger = logging.getLogger(__name__)

DEFAULT_KS = (1, 5, 10)


class MetricsReport(BaseModel):
    """
    Recall at rank K for one retrieval direction.

    Example line (``to_line``): ``T2V 46.00 73.10 82.40 67.17``
    """

    direction: str = Field(description="T2V or V2T, optionally suffixed '/label'")
    recalls: Dict[int, float] = Field(description="K -> recall percentage")
    mean: float = Field(description="mean of the reported recalls")

    @model_validator(mode="after")
    def _monotone(self) -> "MetricsReport":
        values = [self.recalls[k] for k in sorted(self.recalls)]
        if any(v < 0 or v > 100 for v in values) or any(a > b for a, b in zip(values, values[1:])):
            raise ValueError(f"recalls must be within [0, 100] and nondecreasing in K, got {self.recalls}")
        return self

    def to_line(self) -> str:
        values = " ".join(f"{self.recalls[k]:.2f}" for k in sorted(self.recalls))
        return f"{self.direction} {values} {self.mean:.2f}"


@dataclass(frozen=True)
class TauSchedule:
    """Upper bound on the temperature: linear decay from cap_start to cap_end, or constant."""

    cap_start: float = 100.0
    cap_end: float = 20.0
    total_steps: int = 0
    shape: str = "linear"

    @classmethod
    def from_config(cls, tau: TauConfig, total_steps: int) -> "TauSchedule":
        return cls(tau.cap_start, tau.cap_end, tau.total_steps or total_steps, tau.cap)


def pool_video(frame_cls: Tensor) -> Tensor:
    """Mean over the frame axis (second to last)."""
    if frame_cls.ndim < 2 or frame_cls.shape[-2] < 1:
        raise ShapeError(f"pool_video: expected (..., V>=1, d) features, got {frame_cls.shape}")
    return mean(frame_cls, axis=-2)


def similarity(e_v: np.ndarray, e_t: np.ndarray, tau_eff: float) -> float:
    """tau_eff times the cosine of two vectors."""
    e_v = np.asarray(e_v, dtype=np.float64)
    e_t = np.asarray(e_t, dtype=np.float64)
    if e_v.shape != e_t.shape or e_v.ndim != 1:
        raise ShapeError(f"similarity: vectors of shape {e_v.shape} and {e_t.shape}")
    nv, nt = np.linalg.norm(e_v), np.linalg.norm(e_t)
    if nv == 0 or nt == 0:
        raise NonFiniteError("similarity: zero-norm vector")
    return float(tau_eff * np.dot(e_v, e_t) / (nv * nt))


def similarity_matrix(videos: Tensor, texts: Tensor, tau: Optional[Tensor] = None) -> Tensor:
    """(B_v, B_t) matrix of tau-scaled cosines; ``tau`` is a (1,) tensor or None for plain cosine."""
    sim = matmul(l2_normalize(videos), transpose(l2_normalize(texts)))
    return mul(sim, tau) if tau is not None else sim


def tau_cap(step: int, schedule: TauSchedule) -> float:
    """
    Cap at a training step.

    ``cap_start - (cap_start - cap_end) * min(1, step / total_steps)`` for the
    linear shape; ``cap_start`` for the constant shape. With total_steps 0 the
    linear cap is ``cap_end`` throughout.
    """
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if schedule.shape == "constant":
        return schedule.cap_start
    if schedule.total_steps <= 0:
        return schedule.cap_end
    fraction = min(1.0, step / schedule.total_steps)
    return schedule.cap_start - (schedule.cap_start - schedule.cap_end) * fraction


def effective_tau(tau: Tensor, cap: float) -> Tensor:
    """tau itself while inside [1, cap], else the clamped constant (no gradient)."""
    value = tau.item()
    if 1.0 <= value <= cap:
        return tau
    return Tensor(np.array([min(max(value, 1.0), cap)]), name="tau_clamped")


def contrastive_loss(sim_matrix: Tensor) -> Tensor:
    """Symmetric cross-entropy with the diagonal as ground truth."""
    if sim_matrix.ndim != 2 or sim_matrix.shape[0] != sim_matrix.shape[1]:
        raise ShapeError(f"contrastive_loss: expected a square matrix, got {sim_matrix.shape}")
    targets = np.arange(sim_matrix.shape[0])
    rows = cross_entropy(sim_matrix, targets)
    cols = cross_entropy(transpose(sim_matrix), targets)
    return scale(add(rows, cols), 0.5)


def ranks_of(sim_row: np.ndarray) -> np.ndarray:
    """Rank of every gallery item: descending score, ties broken by gallery index."""
    order = np.argsort(-sim_row, kind="stable")
    ranks = np.empty(order.size, dtype=np.int64)
    ranks[order] = np.arange(order.size)
    return ranks


def recall_at_k(
    sim_matrix: np.ndarray,
    ground_truth: Sequence[int],
    ks: Sequence[int] = DEFAULT_KS,
    direction: str = "T2V",
    relevant: Optional[np.ndarray] = None,
) -> MetricsReport:
    """
    Percentage of queries whose ground truth ranks within the top K.

    Args:
        sim_matrix: (Q, G) scores, rows are queries
        ground_truth: Gallery index per query
        ks: Cutoffs; K > G counts every query as a hit
        direction: Label of the report
        relevant: Optional (Q, G) boolean mask; a query hits when any relevant
            item ranks within K (label-level recall)

    Returns:
        MetricsReport with the mean of the recalls
    """
    sim = np.asarray(sim_matrix, dtype=np.float64)
    if sim.ndim != 2:
        raise ShapeError(f"recall_at_k: expected (Q, G) scores, got {sim.shape}")
    queries, gallery = sim.shape
    gt = np.asarray(ground_truth, dtype=np.int64)
    if gt.shape != (queries,) or (gt.size and (gt.min() < 0 or gt.max() >= gallery)):
        raise ShapeError(f"recall_at_k: ground truth {gt.shape} invalid for {sim.shape} scores")
    mask = np.zeros(sim.shape, dtype=bool)
    mask[np.arange(queries), gt] = True
    if relevant is not None:
        relevant = np.asarray(relevant, dtype=bool)
        if relevant.shape != sim.shape:
            raise ShapeError(f"recall_at_k: relevant mask {relevant.shape} vs scores {sim.shape}")
        mask |= relevant
    relevant = mask

    best = np.empty(queries, dtype=np.int64)
    for q in range(queries):
        best[q] = ranks_of(sim[q])[relevant[q]].min()

    recalls: Dict[int, float] = {}
    for k in ks:
        if k > gallery:
            logger.warning(f"R@{k} requested for a gallery of {gallery}; reporting 100")
            recalls[k] = 100.0
        else:
            recalls[k] = 100.0 * float(np.count_nonzero(best < k)) / queries if queries else 0.0
    return MetricsReport(direction=direction, recalls=recalls, mean=float(np.mean(list(recalls.values()))))


def chance_recall(gallery: int, k: int = 1) -> float:
    """Expected R@K of random ranking, in percent."""
    return 100.0 * min(1.0, k / gallery)


def binomial_std(gallery: int, queries: int, k: int = 1) -> float:
    """Standard deviation of chance-level R@K over ``queries`` independent queries, in percent."""
    p = min(1.0, k / gallery)
    return 100.0 * math.sqrt(p * (1.0 - p) / queries)
