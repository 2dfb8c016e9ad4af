"""noise-forge: training engine and measurement lab for two-minibatch
noise-enhanced SGD/Adam.

The gradient rule combines two independent minibatch gradients,
alpha * grad(B) + (1 - alpha) * grad(B'), which multiplies the minibatch
noise covariance by alpha^2 + (1 - alpha)^2 while leaving the expected
update direction unchanged. The lab half of the package verifies that
prediction by enumeration, closed form, and Monte Carlo, and the harness
half runs the loss-threshold training protocol that measures its effect on
test accuracy and convergence time.
"""

from .dataio import Dataset, SyntheticSpec, load_idx_pair, make_synthetic, split_holdout
from .harness import (
    AggregateResult,
    Comparison,
    ProbePlan,
    RunRecord,
    SweepResult,
    TrainConfig,
    compare_ne_vs_small_batch,
    probe_run,
    repeat_runs,
    sweep_alpha,
    sweep_batch,
    train_run,
)
from .model import MlpSpec, ParamVector, glorot_init, loss_and_grad
from .noiselab import (
    NoiseStats,
    ProbeRow,
    effective_batch,
    enhancement_factor,
    enumerate_ne_noise_covariance,
    enumerate_noise_covariance,
    exact_noise_covariance,
    exact_noise_trace,
    gradient_diversity,
    measure_stats,
    probe_noise,
    sample_ne_noise,
    sample_sgd_noise,
)
from .optim import NEConfig, OptimizerState, ne_combine, naive_ne_combine, training_step

__version__ = "0.1.0"

__all__ = [
    "AggregateResult",
    "Comparison",
    "Dataset",
    "MlpSpec",
    "NEConfig",
    "NoiseStats",
    "OptimizerState",
    "ParamVector",
    "ProbePlan",
    "ProbeRow",
    "RunRecord",
    "SweepResult",
    "SyntheticSpec",
    "TrainConfig",
    "compare_ne_vs_small_batch",
    "effective_batch",
    "enhancement_factor",
    "enumerate_ne_noise_covariance",
    "enumerate_noise_covariance",
    "exact_noise_covariance",
    "exact_noise_trace",
    "glorot_init",
    "gradient_diversity",
    "load_idx_pair",
    "loss_and_grad",
    "make_synthetic",
    "measure_stats",
    "ne_combine",
    "naive_ne_combine",
    "probe_noise",
    "probe_run",
    "repeat_runs",
    "sample_ne_noise",
    "sample_sgd_noise",
    "split_holdout",
    "sweep_alpha",
    "sweep_batch",
    "train_run",
    "training_step",
    "__version__",
]
