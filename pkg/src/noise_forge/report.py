"""Deterministic markdown report and figure CSVs from saved results.

The report command scans a results tree for directories containing an
``aggregate.csv`` (as written by the train/sweep/probe commands), renders
one summary table per directory, and, when the tree holds both a batch-size
sweep and an alpha sweep, adds a comparison section with effective-batch
annotations and directional flags. Output is a pure function of the input
CSVs: units are visited in sorted order and no timestamps are embedded.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

from .noiselab import effective_batch


def _to_float(text: str) -> float:
    return float(text) if text not in ("", None) else math.nan


@dataclass(frozen=True)
class ResultsUnit:
    """One results directory: its aggregate rows plus per-cell run counts."""

    name: str
    rows: tuple[dict, ...]
    totals: dict[tuple[float, float], int]
    axis: str  # "batch_size", "alpha", or "single"


def _read_rows(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_unit(directory: Path, root: Path) -> ResultsUnit:
    rows = []
    for raw in _read_rows(directory / "aggregate.csv"):
        rows.append(
            {
                "B": int(float(raw["B"])),
                "alpha": float(raw["alpha"]),
                "mean_acc": _to_float(raw["mean_acc"]),
                "std_acc": _to_float(raw["std_acc"]),
                "mean_steps": _to_float(raw["mean_steps"]),
                "std_steps": _to_float(raw["std_steps"]),
                "n_converged": int(float(raw["n_converged"])),
            }
        )
    totals: dict[tuple[float, float], int] = {}
    runs_path = directory / "runs.csv"
    if runs_path.exists():
        for raw in _read_rows(runs_path):
            key = (float(raw["B"]), float(raw["alpha"]))
            totals[key] = totals.get(key, 0) + 1
    alphas = {r["alpha"] for r in rows}
    batches = {r["B"] for r in rows}
    if len(alphas) > 1 and len(batches) == 1:
        axis = "alpha"
    elif len(batches) > 1 and len(alphas) == 1:
        axis = "batch_size"
    else:
        axis = "single"
    name = directory.relative_to(root).as_posix()
    return ResultsUnit(name="." if name == "." else name, rows=tuple(rows), totals=totals, axis=axis)


def _best_row(rows: tuple[dict, ...], key: str) -> dict | None:
    """Row with the highest finite mean accuracy; ties go to the smaller key."""
    best = None
    for row in sorted(rows, key=lambda r: r[key]):
        if math.isfinite(row["mean_acc"]) and (best is None or row["mean_acc"] > best["mean_acc"]):
            best = row
    return best


def _fmt_mean_std(mean: float, std: float, digits: int) -> str:
    if not math.isfinite(mean):
        return "n/a"
    return f"{mean:.{digits}f} +- {std:.{digits}f}"


def _converged_text(unit: ResultsUnit, row: dict) -> str:
    total = unit.totals.get((float(row["B"]), float(row["alpha"])))
    if total is None:
        return str(row["n_converged"])
    return f"{row['n_converged']}/{total}"


def render_unit(unit: ResultsUnit) -> str:
    axis_note = {
        "alpha": f"alpha sweep at B = {unit.rows[0]['B']}",
        "batch_size": f"batch-size sweep at alpha = {unit.rows[0]['alpha']:g}",
        "single": "single configuration",
    }[unit.axis]
    key = "alpha" if unit.axis == "alpha" else "B"
    best = _best_row(unit.rows, key) if unit.axis != "single" else None
    lines = [f"## {unit.name}", "", f"{axis_note}.", ""]
    lines.append("| B | alpha | test accuracy | steps to stop | converged |")
    lines.append("|---|-------|---------------|---------------|-----------|")
    for row in sorted(unit.rows, key=lambda r: (r["B"], r["alpha"])):
        mark = " (best)" if best is row else ""
        lines.append(
            "| {b} | {a:g} | {acc} | {steps} | {conv} |".format(
                b=row["B"],
                a=row["alpha"],
                acc=_fmt_mean_std(row["mean_acc"], row["std_acc"], 4) + mark,
                steps=_fmt_mean_std(row["mean_steps"], row["std_steps"], 1),
                conv=_converged_text(unit, row),
            )
        )
    lines.append("")
    return "\n".join(lines)


def _alpha_flags(rows: tuple[dict, ...]) -> dict[str, bool | None]:
    by_alpha = sorted(rows, key=lambda r: r["alpha"])
    base = [r for r in by_alpha if r["alpha"] == 1.0]
    enhanced = [r for r in by_alpha if r["alpha"] > 1.0]
    flags: dict[str, bool | None] = {}
    if base and enhanced and math.isfinite(base[0]["mean_acc"]):
        best_enh = max(r["mean_acc"] for r in enhanced)
        flags["accuracy-best-enhanced-not-worse"] = bool(
            math.isfinite(best_enh) and best_enh >= base[0]["mean_acc"]
        )
    else:
        flags["accuracy-best-enhanced-not-worse"] = None
    times = [r["mean_steps"] for r in by_alpha]
    if len(times) >= 2 and all(math.isfinite(t) for t in times):
        flags["time-nondecreasing-in-alpha"] = bool(
            all(t2 >= t1 for t1, t2 in zip(times, times[1:]))
        )
    else:
        flags["time-nondecreasing-in-alpha"] = None
    return flags


def _flag_text(value: bool | None) -> str:
    if value is None:
        return "NA (insufficient data)"
    return "PASS" if value else "FAIL"


def render_comparison(batch_unit: ResultsUnit, alpha_unit: ResultsUnit) -> tuple[str, list[tuple]]:
    best_b = _best_row(batch_unit.rows, "B")
    best_a = _best_row(alpha_unit.rows, "alpha")
    b_fixed = alpha_unit.rows[0]["B"]
    lines = ["## Enhancement at fixed B vs reducing B", ""]
    if best_b is None or best_a is None:
        lines.append("Not enough finite results to compare.")
        lines.append("")
        return "\n".join(lines), []
    gap = best_a["mean_acc"] - best_b["mean_acc"]
    lines.append(
        f"- best reduced batch: B = {best_b['B']} at alpha = {best_b['alpha']:g}: "
        f"accuracy {_fmt_mean_std(best_b['mean_acc'], best_b['std_acc'], 4)}, "
        f"steps {_fmt_mean_std(best_b['mean_steps'], best_b['std_steps'], 1)}"
    )
    lines.append(
        f"- best enhanced: alpha = {best_a['alpha']:g} at B = {best_a['B']} "
        f"(B_eff = {effective_batch(int(b_fixed), best_a['alpha']):.1f}): "
        f"accuracy {_fmt_mean_std(best_a['mean_acc'], best_a['std_acc'], 4)}, "
        f"steps {_fmt_mean_std(best_a['mean_steps'], best_a['std_steps'], 1)}"
    )
    lines.append(f"- accuracy gap (enhanced - reduced): {gap:+.4f}")
    for name, value in sorted(_alpha_flags(alpha_unit.rows).items()):
        lines.append(f"- flag {name}: {_flag_text(value)}")
    lines.append("")
    lines.append("| alpha | B_eff | test accuracy | steps to stop |")
    lines.append("|-------|-------|---------------|---------------|")
    for row in sorted(alpha_unit.rows, key=lambda r: r["alpha"]):
        lines.append(
            "| {a:g} | {be:.1f} | {acc} | {steps} |".format(
                a=row["alpha"],
                be=effective_batch(int(b_fixed), row["alpha"]),
                acc=_fmt_mean_std(row["mean_acc"], row["std_acc"], 4),
                steps=_fmt_mean_std(row["mean_steps"], row["std_steps"], 1),
            )
        )
    lines.append("")
    scatter = []
    for row in sorted(batch_unit.rows, key=lambda r: r["B"]):
        scatter.append(("reduce-batch", row["mean_steps"], row["mean_acc"]))
    for row in sorted(alpha_unit.rows, key=lambda r: r["alpha"]):
        scatter.append(("increase-alpha", row["mean_steps"], row["mean_acc"]))
    return "\n".join(lines), scatter


def _write_csv(path: Path, header: list[str], rows: list[tuple]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v}" if not isinstance(v, float) else repr(v) for v in row])


def emit_report(results_dir: str | Path, out_dir: str | Path | None = None) -> Path:
    """Render report.md and figure CSVs for every results unit under results_dir."""
    results_dir = Path(results_dir)
    if not results_dir.is_dir():
        raise FileNotFoundError(f"results directory {results_dir} does not exist")
    unit_dirs = sorted(
        {p.parent for p in results_dir.rglob("aggregate.csv")},
        key=lambda p: p.relative_to(results_dir).as_posix(),
    )
    if not unit_dirs:
        raise ValueError(f"no aggregate.csv found under {results_dir}")
    out_dir = Path(out_dir) if out_dir is not None else results_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    units = [load_unit(d, results_dir) for d in unit_dirs]
    sections = ["# Training results", ""]
    fig_dir = out_dir / "figures"
    for unit in units:
        sections.append(render_unit(unit))
        if unit.axis in ("batch_size", "alpha"):
            key = "alpha" if unit.axis == "alpha" else "B"
            stem = unit.name.replace("/", "_").replace(".", "root")
            acc_rows = [
                (row[key], row["mean_acc"], row["std_acc"])
                for row in sorted(unit.rows, key=lambda r: r[key])
            ]
            time_rows = [
                (row[key], row["mean_steps"], row["std_steps"])
                for row in sorted(unit.rows, key=lambda r: r[key])
            ]
            _write_csv(fig_dir / f"fig_{stem}_accuracy.csv", [key, "mean_acc", "std_acc"], acc_rows)
            _write_csv(fig_dir / f"fig_{stem}_time.csv", [key, "mean_steps", "std_steps"], time_rows)
    batch_units = [u for u in units if u.axis == "batch_size"]
    alpha_units = [u for u in units if u.axis == "alpha"]
    if batch_units and alpha_units:
        section, scatter = render_comparison(batch_units[0], alpha_units[0])
        sections.append(section)
        if scatter:
            _write_csv(
                fig_dir / "fig_tradeoff_scatter.csv",
                ["series", "convergence_steps", "accuracy"],
                scatter,
            )
    report_path = out_dir / "report.md"
    report_path.write_text("\n".join(sections), encoding="utf-8")
    return report_path
