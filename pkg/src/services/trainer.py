import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from src.config.run_config import RunConfig, TrainConfig
from src.services.encoders import ModelState, build_model, embed_text, embed_video
from src.services.numerics import NonFiniteError, Tensor, concat, grad, no_grad
from src.services.retrieval import (
    MetricsReport,
    TauSchedule,
    contrastive_loss,
    effective_tau,
    recall_at_k,
    similarity_matrix,
    tau_cap,
)
from src.services.synthdata import VideoTextSample, label_matrix, stack_batch

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 42, 123, 2022)
EVAL_CHUNK = 64


class DivergenceError(RuntimeError):
    """Raised when the training loss becomes non-finite; ``step`` is the failing step."""

    def __init__(self, step: int, message: str):
        super().__init__(f"training diverged at step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class StepRecord:
    step: int
    loss: float
    tau: float
    cap: float

    def to_line(self) -> str:
        return f"{self.step} {self.loss:.6f} {self.tau:.6f} {self.cap:.6f}"


@dataclass
class TrainResult:
    state: ModelState
    log: List[StepRecord] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)


class AdamOptimizer:
    """
    Adaptive-moment updates with bias correction, applied in place.

    Moment buffers exist only for the parameters handed in, so passing the
    tunable set keeps the backbone untouched.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float, beta1: float, beta2: float, eps: float):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    @classmethod
    def from_config(cls, params: Mapping[str, Tensor], train: TrainConfig) -> "AdamOptimizer":
        return cls(params, train.lr, train.beta1, train.beta2, train.adam_eps)

    def step(self, grads: Mapping[str, Tensor]) -> None:
        unknown = set(grads) - set(self.params)
        if unknown:
            raise ValueError(f"Gradients for parameters outside the optimizer: {sorted(unknown)}")
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, param in self.params.items():
            g = grads[name].data if name in grads else np.zeros_like(param.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            param.data -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


def batch_loss(state: ModelState, frames: np.ndarray, tokens: np.ndarray, tau_eff: Tensor) -> Tensor:
    """Symmetric contrastive loss of one batch at the given effective temperature."""
    videos = embed_video(frames, state)
    texts = embed_text(tokens, state)
    return contrastive_loss(similarity_matrix(videos, texts, tau_eff))


def steps_per_epoch(n_samples: int, batch_size: int) -> Tuple[int, int]:
    """(batches, batch size): full batches only, or one batch of everything when smaller."""
    if n_samples < 2:
        raise ValueError(f"Need at least 2 training samples, got {n_samples}")
    if n_samples < batch_size:
        return 1, n_samples
    return n_samples // batch_size, batch_size


def train(
    config: RunConfig,
    samples: Sequence[VideoTextSample],
    state: Optional[ModelState] = None,
    on_step: Optional[Callable[[StepRecord], None]] = None,
    max_steps: Optional[int] = None,
) -> TrainResult:
    """
    Optimize the tunable set with the symmetric contrastive loss.

    Each step uses ``tau_eff = clamp(tau, 1, cap(step))`` and clamps tau
    into ``[1, cap(step)]`` after the update. Batch order comes from
    ``train.seed`` and the epoch index.

    Args:
        config: Run configuration
        samples: Training pairs
        state: Starting state; built from the config when omitted
        on_step: Called with every step record
        max_steps: Stop early after this many steps

    Returns:
        TrainResult with the trained state and the per-step log

    Raises:
        DivergenceError: If the loss becomes non-finite
    """
    state = state if state is not None else build_model(config)
    tc = config.train
    batches, batch_size = steps_per_epoch(len(samples), tc.batch_size)
    total_steps = tc.epochs * batches
    schedule = TauSchedule.from_config(config.tau, max(0, total_steps - 1))
    optimizer = AdamOptimizer.from_config(state.tunable, tc)
    result = TrainResult(state)
    logger.info(
        f"Training {len(state.tunable)} tunable tensors for {tc.epochs} epochs x {batches} batches of {batch_size}"
    )

    step = 0
    for epoch in range(tc.epochs):
        perm = np.random.default_rng(np.random.SeedSequence([tc.seed, 3, epoch])).permutation(len(samples))
        losses = []
        for b in range(batches):
            if max_steps is not None and step >= max_steps:
                return result
            frames, tokens = stack_batch([samples[i] for i in perm[b * batch_size : (b + 1) * batch_size]])
            cap = tau_cap(step, schedule)
            tau_eff = effective_tau(state.tau, cap)
            try:
                loss = batch_loss(state, frames, tokens, tau_eff)
            except NonFiniteError as e:
                logger.error(f"Non-finite value at step {step}: {e}")
                raise DivergenceError(step, str(e)) from e
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(step, f"loss {value}")
            tau_value = tau_eff.item()

            optimizer.step(grad(loss))
            state.tau.data[0] = min(max(state.tau.data[0], 1.0), cap)

            record = StepRecord(step, value, tau_value, cap)
            result.log.append(record)
            losses.append(value)
            logger.debug(record.to_line())
            if on_step is not None:
                on_step(record)
            step += 1
        result.epoch_losses.append(float(np.mean(losses)))
        logger.info(f"Epoch {epoch + 1}/{tc.epochs}: mean loss {result.epoch_losses[-1]:.6f}")
    return result


class EvaluationResult(BaseModel):
    """Pair-level and label-level reports in both directions."""

    t2v: MetricsReport
    v2t: MetricsReport
    t2v_label: MetricsReport
    v2t_label: MetricsReport

    def reports(self) -> List[MetricsReport]:
        return [self.t2v, self.v2t, self.t2v_label, self.v2t_label]

    def lines(self) -> List[str]:
        return [report.to_line() for report in self.reports()]


def extract_features(
    state: ModelState, samples: Sequence[VideoTextSample], chunk: int = EVAL_CHUNK
) -> Tuple[Tensor, Tensor]:
    """Offline video and text embeddings, each modality encoded independently."""
    videos, texts = [], []
    with no_grad():
        for start in range(0, len(samples), chunk):
            frames, tokens = stack_batch(samples[start : start + chunk])
            videos.append(embed_video(frames, state))
            texts.append(embed_text(tokens, state))
        return concat(videos, axis=0), concat(texts, axis=0)


def evaluate(state: ModelState, samples: Sequence[VideoTextSample]) -> EvaluationResult:
    """
    Retrieval metrics on a paired gallery (ground truth is the diagonal).

    Raises:
        ShapeError: If the samples do not match the model's encoder dims
    """
    if not samples:
        raise ValueError("Cannot evaluate on an empty set")
    videos, texts = extract_features(state, samples)
    with no_grad():
        sim = similarity_matrix(videos, texts).data
    gt = np.arange(len(samples))
    relevant = label_matrix(samples, samples)
    result = EvaluationResult(
        t2v=recall_at_k(sim.T, gt, direction="T2V"),
        v2t=recall_at_k(sim, gt, direction="V2T"),
        t2v_label=recall_at_k(sim.T, gt, direction="T2V/label", relevant=relevant.T),
        v2t_label=recall_at_k(sim, gt, direction="V2T/label", relevant=relevant),
    )
    for line in result.lines():
        logger.info(f"Evaluation: {line}")
    return result


class SeedSummary(BaseModel):
    direction: str
    k: int
    mean: float
    std: float

    def to_line(self) -> str:
        return f"{self.direction} R@{self.k} {self.mean:.2f} {self.std:.2f}"


class MultiSeedReport(BaseModel):
    seeds: List[int]
    per_seed: Dict[int, EvaluationResult]
    summary: List[SeedSummary]

    def lines(self) -> List[str]:
        return [row.to_line() for row in self.summary]


def train_multiseed(
    config: RunConfig,
    train_samples: Sequence[VideoTextSample],
    test_samples: Sequence[VideoTextSample],
    seeds: Sequence[int] = DEFAULT_SEEDS,
) -> MultiSeedReport:
    """Train and evaluate once per ``train.seed``; report mean and std of every recall."""
    if not seeds:
        raise ValueError("At least one seed is required")
    per_seed: Dict[int, EvaluationResult] = {}
    for seed in seeds:
        seeded = config.updated(**{"train.seed": str(seed)})
        logger.info(f"Multi-seed run: train.seed={seed}")
        result = train(seeded, train_samples)
        per_seed[seed] = evaluate(result.state, test_samples)

    summary = []
    first = per_seed[seeds[0]]
    for index, report in enumerate(first.reports()):
        for k in sorted(report.recalls):
            values = np.array([per_seed[s].reports()[index].recalls[k] for s in seeds])
            summary.append(SeedSummary(direction=report.direction, k=k, mean=float(values.mean()), std=float(values.std())))
    return MultiSeedReport(seeds=list(seeds), per_seed=per_seed, summary=summary)
