"""Measurement lab for minibatch gradient noise.

Conventions used throughout:

* At frozen parameters w, the per-sample gradient matrix G is (N, P), row mu
  holding the gradient of sample mu's loss; g_bar is the full gradient.
* Vanilla noise for a minibatch S of size B is xi = eta * (mean(G[S]) - g_bar).
  Its exact covariance over uniform draws without replacement is
      (eta^2 / B) * (N - B) / (N - 1) * [ (1/N) sum_mu g_mu g_mu^T - g_bar g_bar^T ],
  and dropping the finite-population factor (N - B)/(N - 1) gives the
  large-N approximation.
* Enhanced noise with weight alpha over an independent pair (S, S') is
  xi_ne = alpha * xi + (1 - alpha) * xi', whose covariance is the vanilla
  covariance scaled by alpha^2 + (1 - alpha)^2.
* Noise samples are realized as rows of an (n_samples, P) float64 matrix.

Dense routines guard their own cost and raise CapabilityError rather than
silently thrash; probe_noise is the streaming path that works at any P.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .dataio import Dataset
from .model import ParamVector, loss_and_grad, per_sample_grad_matrix, per_sample_grad_norms
from .rng import named_stream

MAX_DENSE_PARAMS = 2000
MAX_ENUM_SUBSETS = 1_000_000
MAX_ENUM_PAIRS = 1_000_000
MAX_SAMPLE_ENTRIES = 50_000_000


class CapabilityError(RuntimeError):
    """The requested computation exceeds this routine's intended scale."""


def enhancement_factor(alpha: float) -> float:
    """Noise variance multiplier alpha^2 + (1 - alpha)^2.

    Equals 1 exactly at alpha in {0, 1}, exceeds 1 outside [0, 1], and dips
    to a minimum of 0.5 at alpha = 0.5 (weights between 0 and 1 average the
    two batches and damp noise instead of enhancing it).
    """
    if not np.isfinite(alpha):
        raise ValueError("alpha must be finite")
    return float(alpha**2 + (1.0 - alpha) ** 2)


def effective_batch(batch_size: int, alpha: float) -> float:
    """Batch size whose vanilla noise level matches enhanced noise at (B, alpha):
    B / (alpha^2 + (1 - alpha)^2)."""
    if int(batch_size) < 1:
        raise ValueError("batch_size must be >= 1")
    return float(batch_size) / enhancement_factor(alpha)


def _finite_population_factor(n: int, b: int, large_n_approx: bool) -> float:
    if not (1 <= b <= n):
        raise ValueError("need 1 <= batch_size <= n_samples")
    if large_n_approx:
        return 1.0
    if n == 1:
        # B = N = 1: the only minibatch is the dataset, noise is identically 0.
        return 0.0
    return (n - b) / (n - 1)


def noise_covariance_from_grads(
    grads: np.ndarray, eta: float, batch_size: int, *, large_n_approx: bool = False
) -> np.ndarray:
    """Exact (P, P) vanilla noise covariance from a per-sample gradient matrix."""
    g = np.asarray(grads, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError("grads must be (n_samples, n_params)")
    n, p = g.shape
    if p > MAX_DENSE_PARAMS:
        raise CapabilityError(
            f"dense covariance needs P <= {MAX_DENSE_PARAMS}, got {p}; use probe_noise"
        )
    factor = _finite_population_factor(n, batch_size, large_n_approx)
    g_bar = g.mean(axis=0)
    second = g.T @ g / n - np.outer(g_bar, g_bar)
    return (eta**2 / batch_size) * factor * second


def enumerate_noise_covariance_from_grads(
    grads: np.ndarray, eta: float, batch_size: int, chunk_size: int = 4096
) -> np.ndarray:
    """Population covariance of xi over every size-B subset, by enumeration.

    Also asserts the enumerated noise mean is zero (absolute tolerance
    1e-12); a violation would mean the arithmetic itself is broken.
    """
    g = np.asarray(grads, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError("grads must be (n_samples, n_params)")
    n, p = g.shape
    if not (1 <= batch_size <= n):
        raise ValueError("need 1 <= batch_size <= n_samples")
    if p > MAX_DENSE_PARAMS:
        raise CapabilityError(f"enumeration needs P <= {MAX_DENSE_PARAMS}, got {p}")
    n_subsets = math.comb(n, batch_size)
    if n_subsets > MAX_ENUM_SUBSETS:
        raise CapabilityError(
            f"C({n}, {batch_size}) = {n_subsets} subsets exceeds {MAX_ENUM_SUBSETS}"
        )
    g_bar = g.mean(axis=0)
    second = np.zeros((p, p))
    mean_acc = np.zeros(p)
    combos = itertools.combinations(range(n), batch_size)
    done = 0
    while True:
        block = list(itertools.islice(combos, chunk_size))
        if not block:
            break
        idx = np.array(block, dtype=np.int64)
        xi = eta * (g[idx].mean(axis=1) - g_bar)
        second += xi.T @ xi
        mean_acc += xi.sum(axis=0)
        done += idx.shape[0]
    mean = mean_acc / n_subsets
    if np.abs(mean).max() > 1e-12:
        raise ArithmeticError(
            f"enumerated noise mean is not zero (max |mean| = {np.abs(mean).max():.3e})"
        )
    return second / n_subsets


def enumerate_ne_noise_covariance_from_grads(
    grads: np.ndarray, eta: float, batch_size: int, alpha: float
) -> np.ndarray:
    """Population covariance of alpha*xi + (1-alpha)*xi' over all subset pairs.

    Enumerates every ordered pair of size-B subsets (M^2 pairs for
    M = C(N, B)), so it is exact and directly comparable to the vanilla
    enumeration scaled by the enhancement factor.
    """
    g = np.asarray(grads, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError("grads must be (n_samples, n_params)")
    if not np.isfinite(alpha):
        raise ValueError("alpha must be finite")
    n, p = g.shape
    if not (1 <= batch_size <= n):
        raise ValueError("need 1 <= batch_size <= n_samples")
    if p > MAX_DENSE_PARAMS:
        raise CapabilityError(f"enumeration needs P <= {MAX_DENSE_PARAMS}, got {p}")
    m = math.comb(n, batch_size)
    if m * m > MAX_ENUM_PAIRS:
        raise CapabilityError(f"{m}^2 subset pairs exceed {MAX_ENUM_PAIRS}")
    g_bar = g.mean(axis=0)
    idx = np.array(list(itertools.combinations(range(n), batch_size)), dtype=np.int64)
    xi = eta * (g[idx].mean(axis=1) - g_bar)
    pairs = alpha * xi[:, None, :] + (1.0 - alpha) * xi[None, :, :]
    flat = pairs.reshape(m * m, p)
    mean = flat.mean(axis=0)
    if np.abs(mean).max() > 1e-12:
        raise ArithmeticError(
            f"enumerated pair noise mean is not zero (max |mean| = {np.abs(mean).max():.3e})"
        )
    return flat.T @ flat / (m * m)


def _grad_matrix(w: ParamVector, ds: Dataset) -> np.ndarray:
    if ds.n_samples * len(w) > MAX_SAMPLE_ENTRIES:
        raise CapabilityError(
            f"per-sample gradient matrix would hold {ds.n_samples * len(w)} doubles; "
            "use probe_noise for large models"
        )
    return per_sample_grad_matrix(w, ds)


def exact_noise_covariance(
    w: ParamVector, ds: Dataset, eta: float, batch_size: int, *, large_n_approx: bool = False
) -> np.ndarray:
    """Closed-form vanilla noise covariance at frozen parameters."""
    if len(w) > MAX_DENSE_PARAMS:
        raise CapabilityError(
            f"dense covariance needs P <= {MAX_DENSE_PARAMS}, got {len(w)}; "
            "exact_noise_trace works at any size"
        )
    return noise_covariance_from_grads(
        _grad_matrix(w, ds), eta, batch_size, large_n_approx=large_n_approx
    )


def enumerate_noise_covariance(
    w: ParamVector, ds: Dataset, eta: float, batch_size: int
) -> np.ndarray:
    """Enumeration oracle for the vanilla covariance (small N, B only)."""
    return enumerate_noise_covariance_from_grads(_grad_matrix(w, ds), eta, batch_size)


def enumerate_ne_noise_covariance(
    w: ParamVector, ds: Dataset, eta: float, batch_size: int, alpha: float
) -> np.ndarray:
    """Enumeration oracle for the enhanced covariance over all subset pairs."""
    return enumerate_ne_noise_covariance_from_grads(_grad_matrix(w, ds), eta, batch_size, alpha)


def exact_noise_trace(
    w: ParamVector, ds: Dataset, eta: float, batch_size: int, *, large_n_approx: bool = False
) -> float:
    """Trace of the exact vanilla covariance, streamed at any parameter count.

    tr Cov = (eta^2/B) * f * [ (1/N) sum_mu |g_mu|^2 - |g_bar|^2 ]
    where f is the finite-population factor; per-sample squared norms come
    from the rank-one layer structure, so no (N, P) matrix is formed.
    """
    factor = _finite_population_factor(ds.n_samples, batch_size, large_n_approx)
    sq_norms, total = per_sample_grad_norms(w, ds)
    n = ds.n_samples
    g_bar_sq = float(total.values @ total.values) / (n * n)
    return float((eta**2 / batch_size) * factor * (sq_norms.mean() - g_bar_sq))


def _index_chunks(rng: np.random.Generator, n_draws: int, n_total: int, batch_size: int, chunk_size: int):
    """Yield (k, B) index matrices of uniform without-replacement draws.

    Implemented as argsort of iid uniforms per row: the first B positions of
    a uniformly random permutation.
    """
    remaining = n_draws
    while remaining > 0:
        k = min(chunk_size, remaining)
        u = rng.random((k, n_total))
        yield np.argsort(u, axis=1)[:, :batch_size]
        remaining -= k


def sample_sgd_noise(
    w: ParamVector,
    ds: Dataset,
    eta: float,
    batch_size: int,
    n_samples: int,
    seed: int,
    stream_index: int = 0,
    chunk_size: int = 512,
) -> np.ndarray:
    """Monte Carlo vanilla noise samples, one per row of the (n_samples, P) result.

    Minibatches come from the "noise-primary" stream of ``seed``, so the
    draw sequence is reproducible and shared with the enhanced sampler's
    primary batches.
    """
    if not (1 <= batch_size <= ds.n_samples):
        raise ValueError("need 1 <= batch_size <= n_samples")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    g = _grad_matrix(w, ds)
    if n_samples * g.shape[1] > MAX_SAMPLE_ENTRIES:
        raise CapabilityError("sample matrix too large; use probe_noise")
    g_bar = g.mean(axis=0)
    rng = named_stream(seed, "noise-primary", stream_index)
    out = np.empty((n_samples, g.shape[1]))
    row = 0
    for idx in _index_chunks(rng, n_samples, ds.n_samples, batch_size, chunk_size):
        out[row : row + idx.shape[0]] = eta * (g[idx].mean(axis=1) - g_bar)
        row += idx.shape[0]
    return out


def sample_ne_noise(
    w: ParamVector,
    ds: Dataset,
    eta: float,
    batch_size: int,
    alpha: float,
    n_samples: int,
    seed: int,
    stream_index: int = 0,
    chunk_size: int = 512,
) -> np.ndarray:
    """Monte Carlo enhanced noise samples alpha*xi + (1-alpha)*xi'.

    Primary batches replay the exact "noise-primary" sequence of
    sample_sgd_noise under the same seed; enhancement batches come from the
    independent "noise-enhancement" stream. At alpha = 1 the result equals
    the vanilla samples bit for bit.
    """
    if not np.isfinite(alpha):
        raise ValueError("alpha must be finite")
    if not (1 <= batch_size <= ds.n_samples):
        raise ValueError("need 1 <= batch_size <= n_samples")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    g = _grad_matrix(w, ds)
    if n_samples * g.shape[1] > MAX_SAMPLE_ENTRIES:
        raise CapabilityError("sample matrix too large; use probe_noise")
    g_bar = g.mean(axis=0)
    rng_p = named_stream(seed, "noise-primary", stream_index)
    rng_e = named_stream(seed, "noise-enhancement", stream_index)
    out = np.empty((n_samples, g.shape[1]))
    row = 0
    chunks_p = _index_chunks(rng_p, n_samples, ds.n_samples, batch_size, chunk_size)
    chunks_e = _index_chunks(rng_e, n_samples, ds.n_samples, batch_size, chunk_size)
    for idx_p, idx_e in zip(chunks_p, chunks_e):
        xi_p = eta * (g[idx_p].mean(axis=1) - g_bar)
        if alpha == 1.0:
            out[row : row + idx_p.shape[0]] = xi_p
        else:
            xi_e = eta * (g[idx_e].mean(axis=1) - g_bar)
            out[row : row + idx_p.shape[0]] = alpha * xi_p + (1.0 - alpha) * xi_e
        row += idx_p.shape[0]
    return out


def excess_kurtosis(samples: np.ndarray, axis: int = 0) -> np.ndarray:
    """Per-coordinate excess kurtosis m4/m2^2 - 3 (population moments).

    Coordinates with zero variance yield nan.
    """
    x = np.asarray(samples, dtype=np.float64)
    centered = x - x.mean(axis=axis, keepdims=True)
    m2 = (centered**2).mean(axis=axis)
    m4 = (centered**4).mean(axis=axis)
    with np.errstate(divide="ignore", invalid="ignore"):
        kurt = m4 / m2**2 - 3.0
    return np.where(m2 > 0.0, kurt, np.nan)


def gradient_diversity_from_matrix(grads: np.ndarray) -> float:
    """sum_mu |g_mu|^2 / |sum_mu g_mu|^2 from an explicit gradient matrix."""
    g = np.asarray(grads, dtype=np.float64)
    num = float(np.einsum("np,np->", g, g))
    s = g.sum(axis=0)
    den = float(s @ s)
    if den == 0.0:
        raise ValueError("summed gradient is zero; diversity undefined")
    return num / den


def gradient_diversity(
    w: ParamVector, ds: Dataset, idx: np.ndarray | None = None, chunk_size: int = 1024
) -> float:
    """Gradient diversity over the indexed samples, streamed at any scale.

    Equals 1 for orthogonal per-sample gradients of equal norm and
    1/n_samples when all per-sample gradients coincide.
    """
    sq_norms, total = per_sample_grad_norms(w, ds, idx, chunk_size)
    den = float(total.values @ total.values)
    if den == 0.0:
        raise ValueError("summed gradient is zero; diversity undefined")
    return float(sq_norms.sum()) / den


@dataclass(frozen=True)
class NoiseStats:
    """Summary statistics of a noise-sample matrix."""

    n_samples: int
    mean: np.ndarray
    trace_cov: float
    diag_cov: np.ndarray
    excess_kurtosis: np.ndarray
    projection_kurtosis: np.ndarray | None = None
    enhancement_ratio: float | None = None
    b_eff: float | None = None
    grad_diversity: float | None = None


def measure_stats(
    samples: np.ndarray,
    baseline_trace: float | None = None,
    batch_size: int | None = None,
    alpha: float | None = None,
    per_sample_grads: np.ndarray | None = None,
    n_projections: int = 0,
    projection_seed: int = 0,
) -> NoiseStats:
    """Summarize noise samples: mean, covariance diagonal/trace, kurtosis.

    With ``baseline_trace`` the enhancement ratio trace/baseline is filled
    in; with ``batch_size`` and ``alpha`` the predicted effective batch is;
    with ``per_sample_grads`` the gradient diversity is. ``n_projections``
    adds excess kurtosis along that many random unit directions (drawn from
    the "projection" stream of ``projection_seed``).
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("samples must be (n_samples, n_params)")
    n, p = x.shape
    if n < 2:
        raise ValueError("need at least 2 samples")
    mean = x.mean(axis=0)
    centered = x - mean
    diag = (centered**2).sum(axis=0) / (n - 1)
    proj_kurt = None
    if n_projections > 0:
        rng = named_stream(projection_seed, "projection")
        u = rng.standard_normal((p, n_projections))
        u /= np.linalg.norm(u, axis=0, keepdims=True)
        proj_kurt = excess_kurtosis(centered @ u)
    ratio = None
    if baseline_trace is not None:
        if not (np.isfinite(baseline_trace) and baseline_trace > 0):
            raise ValueError("baseline_trace must be finite and positive")
        ratio = float(diag.sum() / baseline_trace)
    b_eff = None
    if batch_size is not None and alpha is not None:
        b_eff = effective_batch(batch_size, alpha)
    diversity = None
    if per_sample_grads is not None:
        diversity = gradient_diversity_from_matrix(per_sample_grads)
    return NoiseStats(
        n_samples=n,
        mean=mean,
        trace_cov=float(diag.sum()),
        diag_cov=diag,
        excess_kurtosis=excess_kurtosis(x),
        projection_kurtosis=proj_kurt,
        enhancement_ratio=ratio,
        b_eff=b_eff,
        grad_diversity=diversity,
    )


@dataclass(frozen=True)
class ProbeRow:
    """One noise-probe measurement at a training checkpoint (probe CSV schema)."""

    step: int
    alpha: float
    batch_size: int
    trace_cov: float
    enhancement_ratio: float
    predicted_factor: float
    b_eff: float
    median_excess_kurtosis: float
    grad_diversity: float


def probe_noise(
    w: ParamVector,
    ds: Dataset,
    eta: float,
    batch_size: int,
    alpha: float,
    n_samples: int,
    seed: int,
    step: int = 0,
    stream_index: int = 0,
    chunk_size: int = 64,
) -> ProbeRow:
    """Measure enhanced noise at frozen parameters without dense matrices.

    Enhanced samples are generated minibatch-pair by minibatch-pair (two
    batched gradient evaluations each) and folded into per-coordinate raw
    moment accumulators, so memory stays at O(P) regardless of model size.
    The enhancement ratio divides the empirical enhanced trace by the exact
    closed-form vanilla trace, which is available at any scale.
    """
    if not np.isfinite(alpha):
        raise ValueError("alpha must be finite")
    if n_samples < 2:
        raise ValueError("need at least 2 noise samples")
    n = ds.n_samples
    if not (1 <= batch_size <= n):
        raise ValueError("need 1 <= batch_size <= n_samples")
    _, full_grad = loss_and_grad(w, ds, None)
    base = full_grad.values
    rng_p = named_stream(seed, "noise-primary", stream_index)
    rng_e = named_stream(seed, "noise-enhancement", stream_index)
    p = len(w)
    s1 = np.zeros(p)
    s2 = np.zeros(p)
    s3 = np.zeros(p)
    s4 = np.zeros(p)
    chunks_p = _index_chunks(rng_p, n_samples, n, batch_size, chunk_size)
    chunks_e = _index_chunks(rng_e, n_samples, n, batch_size, chunk_size)
    for idx_p, idx_e in zip(chunks_p, chunks_e):
        for row in range(idx_p.shape[0]):
            _, gp = loss_and_grad(w, ds, idx_p[row])
            xi = eta * (gp.values - base)
            if alpha != 1.0:
                _, ge = loss_and_grad(w, ds, idx_e[row])
                xi = alpha * xi + (1.0 - alpha) * (eta * (ge.values - base))
            s1 += xi
            x2 = xi * xi
            s2 += x2
            s3 += x2 * xi
            s4 += x2 * x2
    r1 = s1 / n_samples
    r2 = s2 / n_samples
    r3 = s3 / n_samples
    r4 = s4 / n_samples
    var_pop = r2 - r1**2
    trace = float(var_pop.sum() * n_samples / (n_samples - 1))
    mu4 = r4 - 4.0 * r3 * r1 + 6.0 * r2 * r1**2 - 3.0 * r1**4
    with np.errstate(divide="ignore", invalid="ignore"):
        kurt = mu4 / var_pop**2 - 3.0
    kurt = np.where(var_pop > 0.0, kurt, np.nan)
    vanilla_trace = exact_noise_trace(w, ds, eta, batch_size)
    ratio = trace / vanilla_trace if vanilla_trace > 0 else float("nan")
    return ProbeRow(
        step=int(step),
        alpha=float(alpha),
        batch_size=int(batch_size),
        trace_cov=trace,
        enhancement_ratio=float(ratio),
        predicted_factor=enhancement_factor(alpha),
        b_eff=effective_batch(batch_size, alpha),
        median_excess_kurtosis=float(np.nanmedian(kurt)),
        grad_diversity=gradient_diversity(w, ds),
    )
