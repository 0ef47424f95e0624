"""Deterministic gradient-descent engine with a per-step observation hook."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .datamodel import SplitPair
from .models import (
    BatchData,
    FactorCounts,
    GradBlock,
    ModelSpec,
    Parameters,
    batch_losses,
    check_compatible,
    grad_block,
    init_params,
    train_index,
)


class DivergenceError(RuntimeError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"divergence at step {step}: non-finite {what}")
        self.step = step


class Sampling(str, enum.Enum):
    WITH_REPLACEMENT_FRESH = "with_replacement"
    EPOCH_SHUFFLE = "epoch_shuffle"


@dataclass(frozen=True)
class Minibatch:
    size: int
    sampling: Sampling = Sampling.WITH_REPLACEMENT_FRESH

    def __post_init__(self):
        object.__setattr__(self, "sampling", Sampling(self.sampling))
        if self.size < 1:
            raise ValueError("minibatch size must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    """Gradient-descent settings.

    ``batch=None`` means full-batch descent. With ``reduction="sum"`` the
    update is ``-lr * sum of batch gradients``; ``"mean"`` divides by the batch
    size, i.e. the effective per-step learning rate is ``lr / |B_t|``.
    ``steps=0`` is allowed and leaves the initialization untouched.
    """

    steps: int
    learning_rate: float
    batch: Optional[Minibatch] = None
    clip_norm: Optional[float] = None
    seed: int = 0
    reduction: str = "sum"

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.reduction not in ("sum", "mean"):
            raise ValueError("reduction must be 'sum' or 'mean'")

    @property
    def full_batch(self) -> bool:
        return self.batch is None


def sample_batch(config: TrainConfig, train_size: int, step: int) -> np.ndarray:
    """Training positions visited at ``step``.

    Randomness is derived from ``(config.seed, step)`` so any step can be
    reproduced independently of the ones before it.
    """
    if train_size < 1:
        raise ValueError("training set is empty")
    if config.batch is None:
        return np.arange(train_size)
    size = config.batch.size
    if config.batch.sampling is Sampling.WITH_REPLACEMENT_FRESH:
        rng = np.random.default_rng([config.seed, 0x5EED, step])
        return rng.integers(0, train_size, size=size)
    if size > train_size:
        raise ValueError(f"minibatch size {size} exceeds training set size {train_size}")
    per_epoch = train_size // size
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([config.seed, 0xE90C, epoch]).permutation(train_size)
    return perm[k * size:(k + 1) * size]


@dataclass
class StepView:
    """State exposed to the hook before the update of step ``step`` is applied.

    ``grads`` are the per-example batch gradients exactly as they enter the
    update (after clipping, if enabled); the update is ``-learning_rate *
    grads.total()``.
    """

    step: int
    learning_rate: float
    positions: np.ndarray
    params: Parameters
    batch: BatchData
    grads: GradBlock
    losses: np.ndarray
    spec: ModelSpec
    counts: Optional[FactorCounts]
    update: np.ndarray

    def grads_for(self, data: BatchData) -> tuple[GradBlock, np.ndarray]:
        """Unclipped per-example gradients and losses of other examples at w_t."""
        return grad_block(self.spec, self.params, data, self.counts)


@dataclass
class TrainSummary:
    steps: int
    train_loss_history: list = field(default_factory=list)
    final_train_loss: float = float("nan")


Hook = Callable[[StepView], None]


def train(spec: ModelSpec, split: SplitPair, config: TrainConfig, hook: Hook | None = None,
          init: Parameters | None = None, counts: FactorCounts | None = None):
    """Run gradient descent on ``split.train``; returns ``(params, summary)``.

    ``init`` overrides the seeded initialization; ``counts`` overrides the
    regularization bookkeeping (defaults to counts of ``split.train``).
    Overflow surfaces as ``DivergenceError`` rather than numpy warnings.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        return _train(spec, split, config, hook, init, counts)


def _train(spec, split, config, hook, init, counts):
    train_set = split.train
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    check_compatible(spec, train_set.schema)
    if counts is None:
        counts = train_index(spec, train_set)
    w = init.copy() if init is not None else init_params(spec, train_set.schema, train_set, config.seed)
    full = BatchData(train_set) if config.full_batch else None
    summary = TrainSummary(steps=config.steps)
    n = len(train_set)

    for t in range(config.steps):
        positions = sample_batch(config, n, t)
        data = full if full is not None else BatchData(train_set, positions)
        block, losses = grad_block(spec, w, data, counts)
        if not np.all(np.isfinite(losses)):
            raise DivergenceError(t, "loss")
        if config.clip_norm is not None:
            norms = np.sqrt(block.sq_norms())
            factors = np.minimum(1.0, config.clip_norm / np.maximum(norms, np.finfo(float).tiny))
            block = block.scaled(factors)
        eta = config.learning_rate / len(positions) if config.reduction == "mean" else config.learning_rate
        total = block.total(data.summers(w))
        if not np.all(np.isfinite(total)):
            raise DivergenceError(t, "gradient")
        summary.train_loss_history.append(float(losses.sum()))
        if hook is not None:
            hook(StepView(t, eta, positions, w, data, block, losses, spec, counts, total))
        w = w.like(w.flat - eta * total)

    final = BatchData(train_set) if full is None else full
    final_loss = float(batch_losses(spec, w, final, counts).sum())
    if not np.isfinite(final_loss):
        raise DivergenceError(config.steps, "loss")
    summary.final_train_loss = final_loss
    return w, summary
