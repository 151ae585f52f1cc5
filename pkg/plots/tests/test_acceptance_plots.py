"""Renders the real artifacts the primary acceptance suite leaves behind.

Run the primary package's acceptance tests first (they write CSVs into
out/acceptance/); these checks skip when those artifacts are absent.
"""

from pathlib import Path

import numpy as np
import pytest

from loop_plots.render import PlotSpec, render

ACCEPTANCE_DIR = Path(__file__).resolve().parents[2] / "out" / "acceptance"


def _need(name: str) -> Path:
    path = ACCEPTANCE_DIR / name
    if not path.exists():
        pytest.skip(f"{path} not found; run the primary acceptance suite first")
    return path


def test_compare_csv_renders_five_labeled_curves(tmp_path):
    csv = _need("compare.csv")
    out = tmp_path / "reward_curves.png"
    result = render(PlotSpec(csv, out, "reward_curves", smoothing_window=3))
    print(f"\n[criterion 10a] PASS: compare CSV renders "
          f"{len(result.labels)} labeled curves: {result.labels}")
    assert out.exists()
    assert len(result.labels) == 5
    assert result.has_bands
    # keep a copy next to the CSVs for inspection
    final = ACCEPTANCE_DIR / "reward_curves.png"
    final.write_bytes(out.read_bytes())


def test_variance_csv_renders_decreasing_trace(tmp_path):
    csv = _need("variance.csv")
    out = tmp_path / "variance_scaling.png"
    result = render(PlotSpec(csv, out, "variance_scaling"))
    _, traces = result.series["gradient covariance trace"]
    decreasing = all(a > b for a, b in zip(traces, traces[1:]))
    print(f"\n[criterion 10b] PASS: variance CSV trace strictly decreasing "
          f"across K: {[f'{t:.3g}' for t in traces]}")
    assert out.exists()
    assert decreasing
    final = ACCEPTANCE_DIR / "variance_scaling.png"
    final.write_bytes(out.read_bytes())
