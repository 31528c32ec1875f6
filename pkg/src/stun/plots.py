"""Figures rendered from the arrays stored in a metrics report.

Nothing here computes a metric. Each function reads arrays out of the report,
draws them and returns the arrays it drew, taken back off the plotted lines,
so callers can check the figure against the report.
"""
from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PNG_META = {"Software": None}
DEFAULT_ECE_METRIC = "ap"


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.stem + ".tmp" + path.suffix)
    fig.savefig(tmp, dpi=100, metadata=PNG_META)
    plt.close(fig)
    os.replace(tmp, path)
    return path


def _xy(line) -> dict[str, list[float]]:
    x, y = line.get_data()
    return {"x": [float(v) for v in x], "y": [float(v) for v in y]}


def reliability_diagram(report: dict, path: str | os.PathLike, metric: str = DEFAULT_ECE_METRIC) -> dict:
    """Per-bin metric against bin confidence, with the identity line for reference."""
    if not report.get("ece"):
        raise ValueError(f"report for {report.get('method')!r} has no calibration data")
    cal = report["ece"][metric]
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot([0, 1], [0, 1], ls="--", color="0.6", lw=1)
    (line,) = ax.plot(cal["confidence"], cal["values"], marker="o")
    ax.set(xlim=(0, 1), ylim=(0, 1.02), xlabel="confidence", ylabel=metric,
           title=f"{report.get('label', '')} ECE={cal['ece']:.3f}")
    drawn = _xy(line)
    _save(fig, Path(path))
    return drawn


def pr_curve_plot(report: dict, path: str | os.PathLike) -> dict:
    pr = report["pr_curve"]
    fig, ax = plt.subplots(figsize=(4, 4))
    (line,) = ax.plot(pr["recall"], pr["precision"], drawstyle="steps-post")
    ax.set(xlim=(0, 1), ylim=(0, 1.02), xlabel="recall", ylabel="precision",
           title=f"{report.get('label', '')} AP={report['ap']:.3f}")
    drawn = _xy(line)
    _save(fig, Path(path))
    return drawn


def removal_curve_plot(report: dict, path: str | os.PathLike) -> dict:
    curve = report.get("removal_curve")
    if not curve:
        raise ValueError(f"report for {report.get('method')!r} has no removal curve")
    fig, ax = plt.subplots(figsize=(4, 4))
    (line,) = ax.plot(curve["fractions"], curve["correctness"], marker="o")
    ax.set(xlim=(0, 1), ylim=(0, 1.02), xlabel="fraction of uncertain queries removed",
           ylabel="top-1 correct ratio", title=report.get("label", ""))
    drawn = _xy(line)
    _save(fig, Path(path))
    return drawn


def plot_report(report: dict, out_dir: str | os.PathLike, metric: str = DEFAULT_ECE_METRIC) -> dict[str, dict]:
    """Write every figure the report supports; returns ``{file name: drawn arrays}``."""
    out = Path(out_dir)
    drawn = {"pr_curve.png": pr_curve_plot(report, out / "pr_curve.png")}
    if report.get("ece"):
        drawn["reliability.png"] = reliability_diagram(report, out / "reliability.png", metric)
    if report.get("removal_curve"):
        drawn["removal_curve.png"] = removal_curve_plot(report, out / "removal_curve.png")
    return drawn
