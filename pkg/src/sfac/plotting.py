"""Static SVG rendering of trace and sweep CSVs.

Output is byte-deterministic: fixed hash salt for SVG ids and no date stamp.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import read_csv  # noqa: E402

SVG_SALT = "sfac"


class EmptySeriesError(ValueError):
    pass


def _save(fig, out_path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({"svg.hashsalt": SVG_SALT}):
        fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out_path


def _band(ax, k, series: np.ndarray, label: str, color):
    q25, med, q75 = np.nanpercentile(series, [25, 50, 75], axis=0)
    ax.plot(k, med, color=color, label=f"{label} (median)")
    ax.fill_between(k, q25, q75, color=color, alpha=0.25, linewidth=0, label=f"{label} (IQR)")


def _stack(tables: list[list[dict]], column: str, path_names: list[str]) -> np.ndarray | None:
    lengths = {len(t) for t in tables}
    if len(lengths) != 1:
        raise ValueError(f"trace files differ in length: {dict(zip(path_names, map(len, tables)))}")
    arr = np.array([[np.nan if r[column] is None else r[column] for r in t] for t in tables])
    return None if np.all(np.isnan(arr)) else arr


def plot_curves(csv_paths: Sequence, out_path, label: str = "SFAC") -> Path:
    """Median and IQR band across seeds of exact avg-J and critic error per round."""
    if not csv_paths:
        raise EmptySeriesError("no trace files given")
    tables = [read_csv(p, required=("k", "J_avg_exact", "critic_err_sq")) for p in csv_paths]
    names = [str(p) for p in csv_paths]
    for name, t in zip(names, tables):
        if not t:
            raise EmptySeriesError(f"{name}: trace holds no rows")
    J = _stack(tables, "J_avg_exact", names)
    if J is None:
        raise EmptySeriesError("J_avg_exact is empty in every trace (oracles disabled?)")
    err = _stack(tables, "critic_err_sq", names)
    k = np.array([r["k"] for r in tables[0]])

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    _band(axes[0], k, J, label, "C0")
    axes[0].set_xlabel("outer round k")
    axes[0].set_ylabel("exact average J")
    axes[0].legend(loc="best")
    if err is not None:
        _band(axes[1], k, err, label, "C1")
        axes[1].set_yscale("log")
        axes[1].legend(loc="best")
    axes[1].set_xlabel("outer round k")
    axes[1].set_ylabel(r"$\|\omega - \omega^*\|^2$")
    fig.suptitle(f"{label}: {len(tables)} seed(s)")
    fig.tight_layout()
    return _save(fig, out_path)


def trend_direction(values: Sequence[float]) -> str | None:
    """'increasing' or 'decreasing' when strictly monotone, else None."""
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size < 2 or v.size != len(values):
        return None
    dv = np.diff(v)
    if np.all(dv > 0):
        return "increasing"
    if np.all(dv < 0):
        return "decreasing"
    return None


SWEEP_METRICS = ("median_final_J", "median_asymptotic_critic_err_sq", "median_grad_norm_floor")


def plot_sweep(csv_paths: Sequence, out_path) -> Path:
    """Sweep summaries: metric medians against N (or h when N is constant)."""
    if not csv_paths:
        raise EmptySeriesError("no summary files given")
    fig, axes = plt.subplots(1, len(SWEEP_METRICS), figsize=(14, 4))
    notes = []
    for idx, path in enumerate(csv_paths):
        rows = read_csv(path, required=("n_agents", "heterogeneity") + SWEEP_METRICS)
        if not rows:
            raise EmptySeriesError(f"{path}: summary holds no rows")
        ns = [r["n_agents"] for r in rows]
        xcol = "n_agents" if len(set(ns)) > 1 else "heterogeneity"
        xs = [r[xcol] for r in rows]
        label = Path(path).parent.name or f"series {idx}"
        for ax, metric in zip(axes, SWEEP_METRICS):
            ys = [r[metric] for r in rows]
            if all(y is None for y in ys):
                continue
            ax.plot(xs, [np.nan if y is None else y for y in ys], marker="o",
                    color=f"C{idx}", label=label)
            ax.set_xlabel("N" if xcol == "n_agents" else "h")
            ax.set_title(metric, fontsize=9)
            trend = trend_direction(ys)
            if trend:
                notes.append(f"{metric} {trend} in {'N' if xcol == 'n_agents' else 'h'}")
    if not any(ax.lines for ax in axes):
        plt.close(fig)
        raise EmptySeriesError("every sweep metric is empty")
    for ax in axes:
        if ax.lines:
            ax.legend(loc="best", fontsize=8)
    fig.suptitle("trend: " + ("; ".join(notes) if notes else "none detected"), fontsize=10)
    fig.tight_layout()
    return _save(fig, out_path)


def cmd_plot(csv_paths: Sequence, kind: str, out_path) -> Path:
    if kind == "curves":
        return plot_curves(csv_paths, out_path)
    if kind == "sweep":
        return plot_sweep(csv_paths, out_path)
    raise ValueError(f"unknown plot kind {kind!r}")
