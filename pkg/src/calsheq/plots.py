"""SVG figures rebuilt purely from a run directory's metrics.csv."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiment import read_metrics  # noqa: E402


def _smooth(y: np.ndarray, window: int = 20) -> np.ndarray:
    if len(y) < window:
        return y
    kernel = np.ones(window) / window
    head = np.cumsum(y[: window - 1]) / np.arange(1, window)
    return np.concatenate([head, np.convolve(y, kernel, mode="valid")])


def _figure(title: str, ylabel: str):
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.set_title(title)
    ax.set_xlabel("agent timesteps")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    return fig, ax


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def write_plots(run_dir) -> list[Path]:
    run_dir = Path(run_dir)
    M = read_metrics(run_dir / "metrics.csv")
    x = M["timesteps"]
    written = []

    if np.isfinite(M["rcal_mean"]).any():
        fig, ax = _figure("Calibrator reward", "r_cal")
        ax.plot(x, M["rcal_mean"], lw=0.6, alpha=0.4, color="C0")
        ax.plot(x, _smooth(M["rcal_mean"]), color="C0", label="mean (smoothed)")
        ax.fill_between(x, M["rcal_min"], M["rcal_max"], color="C0", alpha=0.1, label="min/max")
        ax.legend()
        written.append(_save(fig, run_dir / "calibrator_reward.svg"))

    fig, ax = _figure("Mean episode reward by supertype", "reward")
    for name in sorted(k for k in M if k.startswith("reward_s")):
        ax.plot(x, _smooth(M[name]), label=name.replace("reward_", "supertype "))
    ax.axhline(0.0, color="k", lw=0.5)
    ax.legend()
    written.append(_save(fig, run_dir / "supertype_rewards.svg"))

    fits = sorted(k for k in M if k.startswith("fit_"))
    if fits:
        fig, ax = _figure("Calibration targets", "value")
        for name in fits:
            ax.plot(x, _smooth(M[name]), label=name[4:])
        ax.legend(fontsize="small", ncol=2)
        written.append(_save(fig, run_dir / "target_fits.svg"))

    params = sorted({k[len("param_"):-len("_mean")] for k in M if k.startswith("param_") and k.endswith("_mean")})
    if params:
        fig, ax = _figure("Supertype parameters", "value")
        for j, nm in enumerate(params):
            c = f"C{j % 10}"
            ax.plot(x, M[f"param_{nm}_mean"], color=c, label=nm)
            ax.fill_between(x, M[f"param_{nm}_min"], M[f"param_{nm}_max"], color=c, alpha=0.12)
        ax.legend(fontsize="small", ncol=2)
        written.append(_save(fig, run_dir / "parameters.svg"))
    return written
