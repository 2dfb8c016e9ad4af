"""Optimizer steps and the two-minibatch noise-enhanced gradient rule.

The update direction is alpha * grad(B) + (1 - alpha) * grad(B'), where B is
the primary minibatch from an epoch partition and B' is an independent
minibatch resampled uniformly each step. alpha = 1 reduces exactly to the
base optimizer; alpha > 1 amplifies minibatch noise without changing the
expected direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import Dataset
from .model import ParamVector, loss_and_grad
from .rng import named_stream


class DivergenceError(FloatingPointError):
    """A gradient or update became non-finite; the run cannot continue."""


def validate_minibatch(idx: np.ndarray, n_total: int) -> np.ndarray:
    """Check a minibatch index set: non-empty, distinct, within [0, n_total)."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] == 0:
        raise ValueError("minibatch must be a non-empty 1-D index array")
    if idx.min() < 0 or idx.max() >= n_total:
        raise ValueError("minibatch index out of range")
    if np.unique(idx).shape[0] != idx.shape[0]:
        raise ValueError("minibatch indices must be distinct")
    return idx


@dataclass(frozen=True)
class NEConfig:
    """Noise-enhancement settings for a training run.

    alpha is the primary-batch weight (>= 1; 1 disables enhancement).
    mode selects how the second gradient is formed:
      "pairwise"   alpha * grad(B) + (1 - alpha) * grad(B'), the real rule;
      "naive-full" alpha * grad(B) + (1 - alpha) * grad_full, the oracle
                   variant that needs the exact gradient;
      "off"        plain base optimizer on grad(B).
    All modes consume the minibatch streams identically, so trajectories
    with the same seed stay comparable across modes.
    """

    alpha: float = 1.0
    batch_size: int = 32
    base: str = "adam"
    mode: str = "pairwise"

    def __post_init__(self) -> None:
        if not np.isfinite(self.alpha):
            raise ValueError("alpha must be finite")
        if self.alpha < 1.0:
            raise ValueError("alpha must be >= 1 (1 disables enhancement)")
        if int(self.batch_size) < 1:
            raise ValueError("batch_size must be >= 1")
        if self.base not in ("sgd", "adam"):
            raise ValueError(f"unknown base optimizer {self.base!r}")
        if self.mode not in ("pairwise", "naive-full", "off"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class OptimizerState:
    """Mutable per-run optimizer state; accumulators allocate lazily."""

    learning_rate: float
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValueError("learning_rate must be finite and positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0.0:
            raise ValueError("eps must be positive")


@dataclass
class EpochState:
    """Epoch-partition schedule over n_samples.

    Each epoch draws a fresh permutation and hands out consecutive
    batch_size slices, so within one epoch the primary minibatches are
    disjoint and cover every index exactly once (when batch_size divides
    n_samples; otherwise the short tail is dropped and a new epoch begins).
    """

    n_samples: int
    batch_size: int
    rng: np.random.Generator
    order: np.ndarray = field(init=False)
    cursor: int = field(init=False, default=0)
    epoch: int = field(init=False, default=0)

    def __post_init__(self) -> None:
        if not (1 <= int(self.batch_size) <= int(self.n_samples)):
            raise ValueError("need 1 <= batch_size <= n_samples")
        self.order = self.rng.permutation(self.n_samples)


def sample_minibatch_pair(
    epoch_state: EpochState, enhancement_rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw (primary, enhancement) minibatches of the configured size.

    The primary batch advances the epoch partition; the enhancement batch
    is an independent uniform draw without replacement from the full index
    range, resampled every call.
    """
    n, b = epoch_state.n_samples, epoch_state.batch_size
    if epoch_state.cursor + b > n:
        epoch_state.order = epoch_state.rng.permutation(n)
        epoch_state.cursor = 0
        epoch_state.epoch += 1
    primary = epoch_state.order[epoch_state.cursor : epoch_state.cursor + b].copy()
    epoch_state.cursor += b
    enhancement = enhancement_rng.choice(n, size=b, replace=False)
    return primary, enhancement.astype(np.int64)


@dataclass
class BatchStreams:
    """The pair of random streams feeding sample_minibatch_pair."""

    epoch_state: EpochState
    enhancement_rng: np.random.Generator

    @classmethod
    def from_seed(cls, n_samples: int, batch_size: int, seed: int) -> "BatchStreams":
        return cls(
            EpochState(n_samples, batch_size, named_stream(seed, "primary-batch")),
            named_stream(seed, "enhancement-batch"),
        )


def ne_combine(grad_b: ParamVector, grad_bprime: ParamVector, alpha: float) -> ParamVector:
    """alpha * grad_b + (1 - alpha) * grad_bprime.

    alpha = 1 returns a copy of grad_b outright, so the enhanced path is
    bit-identical to the plain one there (no 0 * g' term to perturb signs).
    """
    if not np.isfinite(alpha):
        raise ValueError("alpha must be finite")
    if grad_b.dims != grad_bprime.dims:
        raise ValueError("gradient shapes disagree")
    if alpha == 1.0:
        return grad_b.copy()
    return ParamVector(alpha * grad_b.values + (1.0 - alpha) * grad_bprime.values, grad_b.dims)


def naive_ne_combine(grad_b: ParamVector, grad_full: ParamVector, alpha: float) -> ParamVector:
    """alpha * grad_b + (1 - alpha) * grad_full (full-gradient oracle variant)."""
    return ne_combine(grad_b, grad_full, alpha)


def _require_finite(g: ParamVector) -> None:
    if not np.isfinite(g.values).all():
        raise DivergenceError("non-finite gradient")


def sgd_step(w: ParamVector, g: ParamVector, state: OptimizerState) -> ParamVector:
    """w - lr * g; increments step_count."""
    if w.dims != g.dims:
        raise ValueError("parameter/gradient shapes disagree")
    _require_finite(g)
    state.step_count += 1
    return ParamVector(w.values - state.learning_rate * g.values, w.dims)


def adam_step(w: ParamVector, g: ParamVector, state: OptimizerState) -> ParamVector:
    """Bias-corrected Adam step: w - lr * m_hat / (sqrt(v_hat) + eps)."""
    if w.dims != g.dims:
        raise ValueError("parameter/gradient shapes disagree")
    _require_finite(g)
    if state.adam_m is None:
        state.adam_m = np.zeros(len(w))
        state.adam_v = np.zeros(len(w))
    t = state.step_count + 1
    state.adam_m = state.beta1 * state.adam_m + (1.0 - state.beta1) * g.values
    state.adam_v = state.beta2 * state.adam_v + (1.0 - state.beta2) * g.values**2
    m_hat = state.adam_m / (1.0 - state.beta1**t)
    v_hat = state.adam_v / (1.0 - state.beta2**t)
    state.step_count = t
    return ParamVector(
        w.values - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps), w.dims
    )


@dataclass(frozen=True)
class StepLog:
    """One training step's log row (the step-log CSV schema)."""

    step: int
    epoch: int
    minibatch_loss: float
    grad_norm_b: float
    grad_norm_bprime: float | None
    combined_norm: float
    lr: float


def training_step(
    w: ParamVector,
    ds: Dataset,
    config: NEConfig,
    state: OptimizerState,
    streams: BatchStreams,
) -> tuple[ParamVector, StepLog]:
    """One full step: sample the pair, combine gradients, apply the base rule.

    Raises DivergenceError when any gradient used is non-finite. The batch
    streams advance the same way in every mode.
    """
    lr = state.learning_rate
    primary, enhancement = sample_minibatch_pair(streams.epoch_state, streams.enhancement_rng)
    loss_b, grad_b = loss_and_grad(w, ds, primary)
    grad_norm_bprime: float | None = None
    if config.mode == "pairwise":
        _, grad_other = loss_and_grad(w, ds, enhancement)
        grad_norm_bprime = float(np.linalg.norm(grad_other.values))
        combined = ne_combine(grad_b, grad_other, config.alpha)
    elif config.mode == "naive-full":
        _, grad_other = loss_and_grad(w, ds, None)
        grad_norm_bprime = float(np.linalg.norm(grad_other.values))
        combined = naive_ne_combine(grad_b, grad_other, config.alpha)
    else:
        combined = grad_b.copy()
    _require_finite(combined)
    step_fn = adam_step if config.base == "adam" else sgd_step
    w_next = step_fn(w, combined, state)
    log = StepLog(
        step=state.step_count,
        epoch=streams.epoch_state.epoch,
        minibatch_loss=loss_b,
        grad_norm_b=float(np.linalg.norm(grad_b.values)),
        grad_norm_bprime=grad_norm_bprime,
        combined_norm=float(np.linalg.norm(combined.values)),
        lr=lr,
    )
    return w_next, log
