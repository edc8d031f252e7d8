"""
Result persistence: long-format results.csv, a config.json echo and SVG line charts.

File bytes depend only on the rows and the config. Floats are written with ``repr`` so
re-reading gives back the same values, and plots carry no date and a fixed hash salt.
"""

import csv
import json
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
from matplotlib import rcParams
from matplotlib.figure import Figure
from pydantic import BaseModel

from stein_select.errors import ResultsIOError
from stein_select.schemas import CalibrationResult, ResultRow, SelectionReport

logger = logging.getLogger(__name__)

FIELDNAMES = list(ResultRow.model_fields)
SUMMARY_SEEDS = ("mean", "limit", "median")

rcParams["svg.hashsalt"] = "stein-select"


# ---------------------------
# Rows
# ---------------------------

def report_rows(report: SelectionReport, experiment: str, scenario: str, score: str,
                n: int, seed: str) -> List[ResultRow]:
    """Leave-one-out ratios, criticism scores and balanced accuracy of one report."""
    rows = []
    for entry in report.per_foreground:
        if entry.error is not None:
            rows.append(ResultRow(experiment=experiment, scenario=scenario, score=score, n=n, seed=seed,
                                  foreground=entry.foreground.label, decision="error"))
            continue
        rows.append(ResultRow(
            experiment=experiment, scenario=scenario, score=score, n=n, seed=seed,
            foreground=entry.foreground.label, value=entry.log_ratio, normalized_value=entry.log_ratio / n,
            decision=entry.decision.value,
        ))
    for item in report.criticism or []:
        rows.append(ResultRow(
            experiment=experiment, scenario=scenario, score="criticism", n=n, seed=seed,
            foreground=str(item.dim + 1), value=item.log_e_ratio, normalized_value=item.log_e_ratio / n,
        ))
    if report.balanced_accuracy is not None:
        rows.append(ResultRow(
            experiment=experiment, scenario=scenario, score="balanced_accuracy", n=n, seed=seed,
            value=report.balanced_accuracy, normalized_value=report.balanced_accuracy,
        ))
    return rows


def calibration_rows(result: CalibrationResult, scenario: str, n: int) -> List[ResultRow]:
    rows = [
        ResultRow(experiment="calibrate", scenario=scenario, score="t_hat", n=n, seed=str(i),
                  value=value, normalized_value=value)
        for i, value in enumerate(result.t_hat_samples)
    ]
    rows.append(ResultRow(experiment="calibrate", scenario=scenario, score="t_hat", n=n, seed="median",
                          value=result.t_median, normalized_value=result.t_median))
    return rows


def mean_rows(rows: Sequence[ResultRow]) -> List[ResultRow]:
    """Per (experiment, scenario, score, n, foreground) mean over seed rows, in first-seen order."""
    groups = OrderedDict()
    for row in rows:
        if row.seed in SUMMARY_SEEDS or row.value is None:
            continue
        key = (row.experiment, row.scenario, row.score, row.n, row.foreground)
        groups.setdefault(key, []).append(row)
    out = []
    for (experiment, scenario, score, n, foreground), members in groups.items():
        normalized = [r.normalized_value for r in members if r.normalized_value is not None]
        out.append(ResultRow(
            experiment=experiment, scenario=scenario, score=score, n=n, seed="mean", foreground=foreground,
            value=float(np.mean([r.value for r in members])),
            normalized_value=float(np.mean(normalized)) if normalized else None,
        ))
    return out


# ---------------------------
# Files
# ---------------------------

def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))
    return value


def write_csv(rows: Iterable[ResultRow], path: Path) -> Path:
    try:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=FIELDNAMES, lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _cell(v) for k, v in row.model_dump().items()})
    except OSError as e:
        raise ResultsIOError(f"Cannot write {path}: {e}")
    return path


def read_csv(path) -> List[ResultRow]:
    """Parse a results.csv back into rows."""
    try:
        with open(path, newline="") as f:
            records = list(csv.DictReader(f))
    except OSError as e:
        raise ResultsIOError(f"Cannot read {path}: {e}")
    rows = []
    for record in records:
        for key in ("value", "normalized_value"):
            record[key] = float(record[key]) if record[key] != "" else None
        rows.append(ResultRow(**record))
    return rows


def write_config(config: BaseModel, path: Path) -> Path:
    try:
        path.write_text(json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise ResultsIOError(f"Cannot write {path}: {e}")
    return path


def _plot_score(rows: List[ResultRow], title: str, path: Path) -> Path:
    grid = sorted({r.n for r in rows})
    use_normalized = any(r.seed == "limit" for r in rows) or all(r.experiment == "toy" for r in rows)
    pick = (lambda r: r.normalized_value) if use_normalized else (lambda r: r.value)

    fig = Figure(figsize=(6, 4))
    ax = fig.subplots()
    if len(grid) > 1:
        seeds = [s for s in dict.fromkeys(r.seed for r in rows) if s not in SUMMARY_SEEDS]
        for seed in seeds:
            points = sorted((r.n, pick(r)) for r in rows if r.seed == seed and pick(r) is not None)
            if points:
                ax.plot(*zip(*points), color="tab:blue", linewidth=0.6, alpha=0.5)
        for seed, style in (("mean", dict(color="tab:blue", linewidth=2.0, label="mean")),
                            ("limit", dict(color="black", linestyle="--", linewidth=1.0, label="limit"))):
            points = sorted((r.n, pick(r)) for r in rows if r.seed == seed and pick(r) is not None)
            if points:
                ax.plot(*zip(*points), **style)
        ax.set_xscale("log")
        ax.set_xlabel("N")
    else:
        labels = list(dict.fromkeys(r.foreground for r in rows))
        positions = {label: i for i, label in enumerate(labels)}
        for seed in dict.fromkeys(r.seed for r in rows):
            chosen = [r for r in rows if r.seed == seed and pick(r) is not None]
            if not chosen:
                continue
            bold = seed == "mean"
            ax.plot([positions[r.foreground] for r in chosen], [pick(r) for r in chosen], marker="o",
                    color="tab:blue", linewidth=2.0 if bold else 0.6, alpha=1.0 if bold else 0.5)
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
        ax.axhline(0.0, color="black", linewidth=0.5)
    ax.set_ylabel("normalized log ratio" if use_normalized else "log ratio")
    ax.set_title(title)
    if ax.get_legend_handles_labels()[0]:
        ax.legend()
    fig.tight_layout()
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as e:
        raise ResultsIOError(f"Cannot write {path}: {e}")
    return path


def emit_results(rows: Sequence[ResultRow], config: Optional[BaseModel], out_dir, plot: bool = True) -> List[Path]:
    """Write results.csv, config.json and, with ``plot``, one plot_<scenario>_<score>.svg per score."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ResultsIOError(f"Cannot create output directory {out_dir}: {e}")

    written = [write_csv(rows, out_dir / "results.csv")]
    if config is not None:
        written.append(write_config(config, out_dir / "config.json"))
    if plot:
        groups = OrderedDict()
        for row in rows:
            if row.score != "balanced_accuracy":
                groups.setdefault((row.scenario, row.score), []).append(row)
        for (scenario, score), members in groups.items():
            name = f"plot_{scenario}_{score}.svg"
            written.append(_plot_score(members, f"{members[0].experiment} {scenario}: {score}", out_dir / name))
    logger.info(f"Wrote {len(written)} file(s) to {out_dir}")
    return written
