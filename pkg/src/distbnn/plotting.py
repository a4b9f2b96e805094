"""PNG figures for run directories and strategy comparisons.

Everything renders off-screen with the Agg backend, so this works headless.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _run_dirs(out: Path) -> list[Path]:
    """The directory itself plus any per-strategy subdirectories holding metrics."""
    dirs = [out] if (out / "metrics.csv").exists() else []
    dirs += sorted(p for p in out.iterdir() if p.is_dir() and (p / "metrics.csv").exists())
    return dirs


def plot_loss_curves(metrics, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    rows = metrics.rows
    for agent in sorted({r.agent for r in rows}):
        mine = sorted((r for r in rows if r.agent == agent), key=lambda r: r.round)
        ax.plot([r.round for r in mine], [r.val_loss for r in mine], label=f"agent {agent}")
    ax.set_xlabel("round")
    ax.set_ylabel("validation BCE")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_heatmap(values: np.ndarray, path, title: str = "", cmap: str = "viridis") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(values, origin="lower", cmap=cmap)
    fig.colorbar(im, ax=ax)
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def render_run(out) -> list[Path]:
    """Loss curves and mean/std heatmaps for a run directory."""
    from .experiments import MetricsLog, read_heatmap_csv

    out = Path(out)
    written = []
    for d in _run_dirs(out):
        metrics = MetricsLog.from_csv((d / "metrics.csv").read_text())
        label = d.name if d != out else "run"
        written.append(plot_loss_curves(metrics, d / "loss.png", label))
        for kind, cmap in (("mean", "gray_r"), ("std", "magma")):
            src = d / f"heatmap_{kind}.csv"
            if src.exists():
                written.append(plot_heatmap(read_heatmap_csv(src), d / f"heatmap_{kind}.png", f"{label} {kind}", cmap))
    thetas = out / "thetas.csv"
    if thetas.exists():
        data = np.loadtxt(thetas, delimiter=",", skiprows=1, ndmin=2)
        fig, ax = plt.subplots(figsize=(6, 4))
        for j in range(1, data.shape[1]):
            ax.plot(data[:, 0], data[:, j], label=f"agent {j - 1}")
        ax.set_xlabel("round")
        ax.set_ylabel("theta")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out / "thetas.png", dpi=100)
        plt.close(fig)
        written.append(out / "thetas.png")
    return written


def render_comparison(report, logs, out) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    fig, ax = plt.subplots(figsize=(5, 4))
    names = report.strategies
    ax.bar(names, [report.final_loss[s] for s in names], color="steelblue")
    ax.set_ylabel("final validation BCE (seed mean)")
    fig.tight_layout()
    fig.savefig(out / "final_loss.png", dpi=100)
    plt.close(fig)
    written.append(out / "final_loss.png")
    if logs:
        fig, ax = plt.subplots(figsize=(6, 4))
        for strategy, by_seed in logs.items():
            curves = [m.val_curve() for m in by_seed.values()]
            n = min(len(c[0]) for c in curves)
            ax.plot(curves[0][0][:n], np.mean([c[1][:n] for c in curves], axis=0), label=strategy)
        ax.set_xlabel("round")
        ax.set_ylabel("validation BCE (seed mean)")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out / "val_curves.png", dpi=100)
        plt.close(fig)
        written.append(out / "val_curves.png")
    return written
