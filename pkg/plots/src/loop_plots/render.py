"""Figure rendering from experiment CSVs.

Two figure kinds:

  reward_curves     one curve per (estimator, k) from a metrics CSV,
                    mean over seeds with a shaded min-max band when more
                    than one seed is present (labeled as min-max; interval
                    estimates are unstable with a handful of seeds);
  variance_scaling  covariance trace against K from a variance-study CSV,
                    drawn on log-log axes with the fitted slope annotated.

Inputs are opened read-only and never modified; the output image is
written only after the figure builds, so a file appears iff rendering
succeeded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

import csv

KINDS = ("reward_curves", "variance_scaling")

REWARD_COLUMNS = ("estimator", "k", "seed", "epoch", "mean_reward")
VARIANCE_COLUMNS = ("k", "resamples", "cov_trace", "slope_loglog")

# kinds whose k genuinely parameterizes the estimator (shown in the label)
GROUPED_ESTIMATORS = {"reinforce_bc", "rloo", "loop"}


class PlotError(Exception):
    """Base class for rendering failures."""


class ColumnMismatchError(PlotError):
    """The CSV is missing columns the requested figure needs."""


class EmptyInputError(PlotError):
    """The CSV contains a header but no data rows."""


@dataclass(frozen=True)
class PlotSpec:
    input_csv: Path
    output_image: Path
    kind: str
    smoothing_window: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PlotError(f"unknown figure kind {self.kind!r}; choose from {KINDS}")
        if self.smoothing_window < 1:
            raise PlotError("smoothing_window must be >= 1")
        if not Path(self.input_csv).exists():
            raise PlotError(f"input CSV does not exist: {self.input_csv}")


@dataclass
class RenderResult:
    """What was drawn, for callers and tests; the image is on disk."""

    output_image: Path
    labels: list[str]
    rows_read: int
    has_bands: bool
    series: dict = field(default_factory=dict)  # label -> (x, y) arrays


def _read_rows(path, required) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise ColumnMismatchError(
                f"{path}: missing column(s) {', '.join(missing)}; "
                f"found {', '.join(header) if header else 'no header'}"
            )
        rows = list(reader)
    if not rows:
        raise EmptyInputError(f"{path}: no data rows")
    return rows


def _smooth(values: np.ndarray, window: int) -> np.ndarray:
    if window <= 1:
        return values
    out = np.empty_like(values, dtype=float)
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out[i] = values[lo : i + 1].mean()
    return out


def _curve_label(estimator: str, k: str) -> str:
    if estimator in GROUPED_ESTIMATORS:
        return f"{estimator} (k={k})"
    return estimator


def _render_reward_curves(spec: PlotSpec, ax) -> RenderResult:
    rows = _read_rows(spec.input_csv, REWARD_COLUMNS)
    curves: dict[str, dict[str, dict[int, float]]] = {}
    for row in rows:
        label = _curve_label(row["estimator"], row["k"])
        curves.setdefault(label, {}).setdefault(row["seed"], {})[
            int(row["epoch"])
        ] = float(row["mean_reward"])
    has_bands = False
    series = {}
    for label in sorted(curves):
        seeds = curves[label]
        epochs = sorted({e for per_seed in seeds.values() for e in per_seed})
        stacked = np.array([
            [per_seed[e] for e in epochs] for per_seed in seeds.values()
            if all(e in per_seed for e in epochs)
        ])
        mean = _smooth(stacked.mean(axis=0), spec.smoothing_window)
        (line,) = ax.plot(epochs, mean, label=label)
        if stacked.shape[0] > 1:
            has_bands = True
            lo = _smooth(stacked.min(axis=0), spec.smoothing_window)
            hi = _smooth(stacked.max(axis=0), spec.smoothing_window)
            ax.fill_between(epochs, lo, hi, alpha=0.18, color=line.get_color())
        series[label] = (np.array(epochs), mean)
    n_seeds = max(len(s) for s in curves.values())
    ax.set_xlabel("epoch")
    ax.set_ylabel("training reward")
    title = "training reward per epoch"
    if has_bands:
        title += f" (mean and min-max band over {n_seeds} seeds)"
    ax.set_title(title)
    ax.legend()
    return RenderResult(
        output_image=Path(spec.output_image),
        labels=sorted(curves),
        rows_read=len(rows),
        has_bands=has_bands,
        series=series,
    )


def _render_variance_scaling(spec: PlotSpec, ax) -> RenderResult:
    rows = _read_rows(spec.input_csv, VARIANCE_COLUMNS)
    points = []
    slope = None
    for row in rows:
        if row["k"].strip().isdigit():
            points.append((int(row["k"]), float(row["cov_trace"])))
        elif row["slope_loglog"].strip():
            slope = float(row["slope_loglog"])
    if not points:
        raise EmptyInputError(f"{spec.input_csv}: no per-K rows")
    points.sort()
    ks = np.array([p[0] for p in points], dtype=float)
    traces = np.array([p[1] for p in points])
    label = "gradient covariance trace"
    ax.plot(ks, traces, marker="o", label=label)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("trajectories per prompt (K)")
    ax.set_ylabel("covariance trace")
    title = "estimator variance against group size"
    if slope is not None:
        title += f" (log-log slope {slope:.2f})"
    ax.set_title(title)
    ax.legend()
    return RenderResult(
        output_image=Path(spec.output_image),
        labels=[label],
        rows_read=len(rows),
        has_bands=False,
        series={label: (ks, traces)},
    )


def render(spec: PlotSpec) -> RenderResult:
    """Render the requested figure; returns what was drawn."""
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    try:
        if spec.kind == "reward_curves":
            result = _render_reward_curves(spec, ax)
        else:
            result = _render_variance_scaling(spec, ax)
        out = Path(spec.output_image)
        if out.parent != Path(""):
            out.parent.mkdir(parents=True, exist_ok=True)
        fig.tight_layout()
        fig.savefig(out, dpi=150)
    finally:
        plt.close(fig)
    return result
