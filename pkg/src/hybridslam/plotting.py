"""Report figures, rendered off-screen with the Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PHASE_COLORS = {"init": "tab:gray", "track": "tab:blue", "map": "tab:orange", "gba": "tab:green"}


def plot_trajectory(path: str | Path, est: np.ndarray, gt: np.ndarray | None = None) -> None:
    """Top-down (x, y) and height-over-frame views of the estimated trajectory."""
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 4.2))
    if gt is not None and len(gt):
        ax0.plot(gt[:, 0], gt[:, 1], "k--", lw=1, label="ground truth")
        ax1.plot(gt[:, 2], "k--", lw=1)
    ax0.plot(est[:, 0], est[:, 1], "-", color="tab:red", lw=1.5, label="estimate")
    ax0.plot(est[:1, 0], est[:1, 1], "o", color="tab:red", ms=4)
    ax0.set_xlabel("x [m]")
    ax0.set_ylabel("y [m]")
    ax0.set_aspect("equal", adjustable="datalim")
    ax0.legend(loc="best", fontsize=8)
    ax1.plot(est[:, 2], color="tab:red")
    ax1.set_xlabel("frame")
    ax1.set_ylabel("z [m]")
    if gt is not None and len(gt) == len(est):
        err = np.linalg.norm(est - gt, axis=1) * 100.0
        ax2 = ax1.twinx()
        ax2.plot(err, color="tab:purple", alpha=0.6, lw=1)
        ax2.set_ylabel("position error [cm]", color="tab:purple")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_losses(path: str | Path, rows) -> None:
    """Total loss of every logged iteration, colored by phase, on a log scale."""
    fig, ax = plt.subplots(figsize=(9, 4))
    totals = np.array([r.total for r in rows], dtype=float)
    phases = np.array([r.phase for r in rows])
    x = np.arange(totals.size)
    for phase, color in PHASE_COLORS.items():
        sel = phases == phase
        if sel.any():
            ax.plot(x[sel], totals[sel], ".", ms=2, color=color, label=phase)
    if totals.size and np.all(totals > 0):
        ax.set_yscale("log")
    ax.set_xlabel("logged iteration")
    ax.set_ylabel("weighted loss")
    ax.legend(loc="upper right", fontsize=8, markerscale=4)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
