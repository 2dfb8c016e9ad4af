"""Training protocol, multi-seed experiments, sweeps, and CSV output.

A run follows a fixed script: Glorot init from the run seed, base optimizer
on the combined two-minibatch gradient, full-train-loss evaluation every
eval_interval steps, one learning-rate halving the first time the loss
reaches l_star, and a stop with status "converged" when it reaches
l_star_star. Convergence time is counted in steps (one two-minibatch update
is one step). Runs that exhaust max_steps are kept with their accuracy;
runs whose gradients or loss go non-finite are marked diverged.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .dataio import Dataset
from .model import MlpSpec, glorot_init, evaluate_accuracy, mean_loss
from .noiselab import ProbeRow, effective_batch, probe_noise
from .optim import BatchStreams, NEConfig, OptimizerState, StepLog, training_step

STATUS_CONVERGED = "converged"
STATUS_DID_NOT_CONVERGE = "did-not-converge"
STATUS_DIVERGED = "diverged"


@dataclass(frozen=True, eq=False)
class TrainConfig:
    """Everything a run needs besides its seed."""

    model: MlpSpec
    ne: NEConfig
    train_data: Dataset
    test_data: Dataset
    learning_rate: float = 1e-3
    l_star: float = 0.01
    l_star_star: float = 0.001
    eval_interval: int = 50
    max_steps: int | None = None
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self) -> None:
        if not (0.0 < self.l_star_star < self.l_star):
            raise ValueError("need 0 < l_star_star < l_star")
        if int(self.eval_interval) < 1:
            raise ValueError("eval_interval must be >= 1")
        if self.max_steps is not None and int(self.max_steps) < 1:
            raise ValueError("max_steps must be >= 1 when given")
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValueError("learning_rate must be finite and positive")
        if len(self.seeds) < 1:
            raise ValueError("need at least one seed")
        if self.model.input_dim != self.train_data.input_dim:
            raise ValueError("model input_dim does not match training data")
        if self.model.num_classes != self.train_data.num_classes:
            raise ValueError("model num_classes does not match training data")
        if self.train_data.input_dim != self.test_data.input_dim:
            raise ValueError("train/test input_dim mismatch")
        if self.ne.batch_size > self.train_data.n_samples:
            raise ValueError("batch_size exceeds training set size")

    def resolved_max_steps(self) -> int:
        """max_steps, defaulting to 200 epochs worth of steps."""
        if self.max_steps is not None:
            return int(self.max_steps)
        return 200 * max(1, self.train_data.n_samples // self.ne.batch_size)


def config_hash(cfg: TrainConfig) -> str:
    """Short stable digest identifying the run configuration (seed excluded)."""
    payload = {
        "dims": list(cfg.model.dims),
        "alpha": cfg.ne.alpha,
        "batch_size": cfg.ne.batch_size,
        "base": cfg.ne.base,
        "mode": cfg.ne.mode,
        "learning_rate": cfg.learning_rate,
        "l_star": cfg.l_star,
        "l_star_star": cfg.l_star_star,
        "eval_interval": cfg.eval_interval,
        "max_steps": cfg.max_steps,
        "n_train": cfg.train_data.n_samples,
        "n_test": cfg.test_data.n_samples,
        "num_classes": cfg.train_data.num_classes,
    }
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass(frozen=True)
class ProbePlan:
    """Which steps to probe noise at, and how hard."""

    steps: tuple[int, ...] = (0,)
    interval: int = 0
    n_samples: int = 200

    def should_probe(self, step: int) -> bool:
        if step in self.steps:
            return True
        return self.interval > 0 and step % self.interval == 0


@dataclass(frozen=True)
class RunRecord:
    """Outcome of one seeded run. wall_time_s is informational only."""

    seed: int
    status: str
    test_accuracy: float
    convergence_steps: int | None
    lr_halved_at: int | None
    final_train_loss: float
    steps_taken: int
    wall_time_s: float = field(compare=False, default=0.0)


def _run(
    cfg: TrainConfig,
    seed: int,
    step_writer: Callable[[StepLog], None] | None = None,
    probe_plan: ProbePlan | None = None,
) -> tuple[RunRecord, list[ProbeRow]]:
    n = cfg.train_data.n_samples
    w = glorot_init(replace(cfg.model, seed=seed))
    state = OptimizerState(learning_rate=cfg.learning_rate)
    streams = BatchStreams.from_seed(n, cfg.ne.batch_size, seed)
    max_steps = cfg.resolved_max_steps()
    halved_at: int | None = None
    conv: int | None = None
    status = STATUS_DID_NOT_CONVERGE
    probe_rows: list[ProbeRow] = []
    last_loss = float("nan")
    t0 = time.perf_counter()
    while True:
        step = state.step_count
        if probe_plan is not None and probe_plan.should_probe(step):
            probe_rows.append(
                probe_noise(
                    w,
                    cfg.train_data,
                    state.learning_rate,
                    cfg.ne.batch_size,
                    cfg.ne.alpha,
                    probe_plan.n_samples,
                    seed,
                    step=step,
                    stream_index=step,
                )
            )
        if step % cfg.eval_interval == 0:
            last_loss = mean_loss(w, cfg.train_data)
            if not np.isfinite(last_loss):
                status = STATUS_DIVERGED
                break
            if last_loss <= cfg.l_star_star:
                status = STATUS_CONVERGED
                conv = step
                break
            if halved_at is None and last_loss <= cfg.l_star:
                state.learning_rate *= 0.5
                halved_at = step
        if step >= max_steps:
            status = STATUS_DID_NOT_CONVERGE
            break
        try:
            w, log = training_step(w, cfg.train_data, cfg.ne, state, streams)
        except FloatingPointError:
            status = STATUS_DIVERGED
            break
        if step_writer is not None:
            step_writer(log)
    if status == STATUS_DIVERGED:
        accuracy = float("nan")
    else:
        accuracy = evaluate_accuracy(w, cfg.test_data)
    record = RunRecord(
        seed=seed,
        status=status,
        test_accuracy=accuracy,
        convergence_steps=conv,
        lr_halved_at=halved_at,
        final_train_loss=last_loss,
        steps_taken=state.step_count,
        wall_time_s=time.perf_counter() - t0,
    )
    return record, probe_rows


def train_run(
    cfg: TrainConfig, seed: int, step_writer: Callable[[StepLog], None] | None = None
) -> RunRecord:
    """Run the full protocol once from the given seed."""
    record, _ = _run(cfg, seed, step_writer=step_writer)
    return record


def probe_run(
    cfg: TrainConfig, seed: int, plan: ProbePlan
) -> tuple[RunRecord, list[ProbeRow]]:
    """train_run plus noise probes at the planned checkpoints."""
    return _run(cfg, seed, probe_plan=plan)


@dataclass(frozen=True)
class AggregateResult:
    """Multi-seed summary.

    Accuracy statistics cover non-diverged runs (did-not-converge runs keep
    their accuracy); convergence statistics cover converged runs only.
    Standard deviations use ddof=0, so a single run reports 0.
    """

    records: tuple[RunRecord, ...]
    mean_accuracy: float
    std_accuracy: float
    mean_convergence: float
    std_convergence: float
    n_converged: int
    n_did_not_converge: int
    n_diverged: int
    status: str  # "ok" or "all-diverged"


def aggregate(records: Iterable[RunRecord]) -> AggregateResult:
    records = tuple(records)
    if not records:
        raise ValueError("no records to aggregate")
    accs = [r.test_accuracy for r in records if r.status != STATUS_DIVERGED]
    convs = [r.convergence_steps for r in records if r.status == STATUS_CONVERGED]
    n_div = sum(1 for r in records if r.status == STATUS_DIVERGED)
    n_dnc = sum(1 for r in records if r.status == STATUS_DID_NOT_CONVERGE)
    return AggregateResult(
        records=records,
        mean_accuracy=float(np.mean(accs)) if accs else float("nan"),
        std_accuracy=float(np.std(accs)) if accs else float("nan"),
        mean_convergence=float(np.mean(convs)) if convs else float("nan"),
        std_convergence=float(np.std(convs)) if convs else float("nan"),
        n_converged=len(convs),
        n_did_not_converge=n_dnc,
        n_diverged=n_div,
        status="all-diverged" if n_div == len(records) else "ok",
    )


def _train_one(args: tuple[TrainConfig, int]) -> RunRecord:
    cfg, seed = args
    return train_run(cfg, seed)


def repeat_runs(
    cfg: TrainConfig, seeds: Iterable[int] | None = None, jobs: int = 1
) -> AggregateResult:
    """Run the protocol once per seed and aggregate. Results are ordered by
    the seed list regardless of scheduling."""
    seed_list = list(cfg.seeds if seeds is None else seeds)
    if not seed_list:
        raise ValueError("need at least one seed")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_train_one, [(cfg, s) for s in seed_list]))
    else:
        records = [train_run(cfg, s) for s in seed_list]
    return aggregate(records)


@dataclass(frozen=True)
class SweepResult:
    """Aggregates along one axis (batch_size or alpha), other settings fixed.

    Cell statistics are meant to be read with >= 2 completed runs behind
    them; that is a reporting convention, not a hard precondition (a grid
    of one with one seed is still a valid, if noisy, sweep).
    """

    axis: str
    values: tuple[float, ...]
    fixed_value: float
    cells: tuple[AggregateResult, ...]

    def best_value(self) -> float | None:
        """Grid value with the highest mean accuracy; ties go to the smaller
        value; cells without a finite accuracy are skipped."""
        best = None
        best_acc = -np.inf
        for value, cell in sorted(zip(self.values, self.cells), key=lambda t: t[0]):
            if np.isfinite(cell.mean_accuracy) and cell.mean_accuracy > best_acc:
                best = value
                best_acc = cell.mean_accuracy
        return best

    def tradeoff_points(self) -> list[tuple[float, float, float]]:
        """(value, mean_convergence, mean_accuracy) per cell, grid order."""
        return [
            (v, c.mean_convergence, c.mean_accuracy)
            for v, c in zip(self.values, self.cells)
        ]


def sweep_batch(
    cfg: TrainConfig, b_grid: Iterable[int], alpha_fixed: float = 1.0, jobs: int = 1
) -> SweepResult:
    """Repeat the protocol for each batch size at fixed alpha."""
    values = [int(b) for b in b_grid]
    if not values:
        raise ValueError("b_grid must be non-empty")
    cells = []
    for b in values:
        cfg_b = replace(cfg, ne=replace(cfg.ne, batch_size=b, alpha=alpha_fixed))
        cells.append(repeat_runs(cfg_b, jobs=jobs))
    return SweepResult(
        axis="batch_size",
        values=tuple(float(v) for v in values),
        fixed_value=float(alpha_fixed),
        cells=tuple(cells),
    )


def sweep_alpha(
    cfg: TrainConfig, alpha_grid: Iterable[float], b_fixed: int, jobs: int = 1
) -> SweepResult:
    """Repeat the protocol for each alpha at fixed batch size."""
    values = [float(a) for a in alpha_grid]
    if not values:
        raise ValueError("alpha_grid must be non-empty")
    cells = []
    for a in values:
        cfg_a = replace(cfg, ne=replace(cfg.ne, batch_size=int(b_fixed), alpha=a))
        cells.append(repeat_runs(cfg_a, jobs=jobs))
    return SweepResult(
        axis="alpha",
        values=tuple(values),
        fixed_value=float(b_fixed),
        cells=tuple(cells),
    )


@dataclass(frozen=True)
class Comparison:
    """Noise enhancement at fixed B versus shrinking B, side by side."""

    best_batch: tuple[float, AggregateResult]
    best_alpha: tuple[float, AggregateResult]
    accuracy_gap: float
    b_eff_rows: tuple[tuple[float, float], ...]
    scatter_rows: tuple[tuple[str, float, float, float], ...]  # series, value, conv, acc
    flags: dict[str, bool | None]


def directional_flags(alpha_sweep: SweepResult) -> dict[str, bool | None]:
    """Directional expectations along the alpha axis.

    "accuracy-best-enhanced-not-worse": the best alpha > 1 cell reaches at
    least the alpha = 1 accuracy. "time-nondecreasing-in-alpha": mean
    convergence steps do not decrease as alpha grows. None when the needed
    cells are missing or have no statistics.
    """
    pairs = sorted(zip(alpha_sweep.values, alpha_sweep.cells), key=lambda t: t[0])
    flags: dict[str, bool | None] = {}
    base = [c for v, c in pairs if v == 1.0]
    enhanced = [c for v, c in pairs if v > 1.0]
    if base and enhanced and np.isfinite(base[0].mean_accuracy):
        best_enh = max(c.mean_accuracy for c in enhanced)
        flags["accuracy-best-enhanced-not-worse"] = bool(
            np.isfinite(best_enh) and best_enh >= base[0].mean_accuracy
        )
    else:
        flags["accuracy-best-enhanced-not-worse"] = None
    times = [c.mean_convergence for _, c in pairs]
    if len(times) >= 2 and all(np.isfinite(t) for t in times):
        flags["time-nondecreasing-in-alpha"] = bool(
            all(t2 >= t1 for t1, t2 in zip(times, times[1:]))
        )
    else:
        flags["time-nondecreasing-in-alpha"] = None
    return flags


def compare_ne_vs_small_batch(
    batch_sweep: SweepResult, alpha_sweep: SweepResult
) -> Comparison:
    """Tabulate both strategies and annotate each alpha with its effective batch."""
    if batch_sweep.axis != "batch_size" or alpha_sweep.axis != "alpha":
        raise ValueError("expected a batch_size sweep and an alpha sweep")

    def best(sweep: SweepResult) -> tuple[float, AggregateResult]:
        value = sweep.best_value()
        if value is None:
            raise ValueError(f"{sweep.axis} sweep has no cell with finite accuracy")
        return value, sweep.cells[sweep.values.index(value)]

    best_b = best(batch_sweep)
    best_a = best(alpha_sweep)
    b_fixed = int(alpha_sweep.fixed_value)
    b_eff_rows = tuple((a, effective_batch(b_fixed, a)) for a in alpha_sweep.values)
    scatter = []
    for v, conv, acc in batch_sweep.tradeoff_points():
        scatter.append(("reduce-batch", v, conv, acc))
    for v, conv, acc in alpha_sweep.tradeoff_points():
        scatter.append(("increase-alpha", v, conv, acc))
    return Comparison(
        best_batch=best_b,
        best_alpha=best_a,
        accuracy_gap=float(best_a[1].mean_accuracy - best_b[1].mean_accuracy),
        b_eff_rows=b_eff_rows,
        scatter_rows=tuple(scatter),
        flags=directional_flags(alpha_sweep),
    )


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: str | Path, header: list[str], rows: Iterable[Iterable]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_step_log(path: str | Path, logs: Iterable[StepLog]) -> None:
    _write_csv(
        path,
        ["step", "epoch", "minibatch_loss", "grad_norm_b", "grad_norm_bprime", "combined_norm", "lr"],
        (
            (l.step, l.epoch, l.minibatch_loss, l.grad_norm_b, l.grad_norm_bprime, l.combined_norm, l.lr)
            for l in logs
        ),
    )


def write_probe_csv(path: str | Path, rows: Iterable[ProbeRow]) -> None:
    _write_csv(
        path,
        [
            "step",
            "alpha",
            "B",
            "trace_cov",
            "enhancement_ratio",
            "predicted_factor",
            "b_eff",
            "median_excess_kurtosis",
            "grad_diversity",
        ],
        (
            (
                r.step,
                r.alpha,
                r.batch_size,
                r.trace_cov,
                r.enhancement_ratio,
                r.predicted_factor,
                r.b_eff,
                r.median_excess_kurtosis,
                r.grad_diversity,
            )
            for r in rows
        ),
    )


def write_runs_csv(
    path: str | Path, entries: Iterable[tuple[str, int, float, RunRecord]]
) -> None:
    """Per-seed rows: (config_hash, B, alpha, record)."""
    _write_csv(
        path,
        ["config_hash", "B", "alpha", "seed", "test_accuracy", "convergence_steps", "lr_halved_at", "status"],
        (
            (h, b, a, r.seed, r.test_accuracy, r.convergence_steps, r.lr_halved_at, r.status)
            for h, b, a, r in entries
        ),
    )


def write_aggregate_csv(
    path: str | Path, entries: Iterable[tuple[int, float, AggregateResult]]
) -> None:
    """Per-cell rows: (B, alpha, aggregate)."""
    _write_csv(
        path,
        ["B", "alpha", "mean_acc", "std_acc", "mean_steps", "std_steps", "n_converged"],
        (
            (b, a, agg.mean_accuracy, agg.std_accuracy, agg.mean_convergence, agg.std_convergence, agg.n_converged)
            for b, a, agg in entries
        ),
    )


def write_scatter_csv(
    path: str | Path, rows: Iterable[tuple[str, float, float, float]]
) -> None:
    """Trade-off points: internal rows are (series, value, conv, acc); the
    value column is for humans reading the report, the CSV carries the
    (series, convergence_steps, accuracy) schema."""
    _write_csv(
        path,
        ["series", "convergence_steps", "accuracy"],
        ((series, conv, acc) for series, _value, conv, acc in rows),
    )
