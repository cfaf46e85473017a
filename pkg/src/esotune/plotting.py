"""Figure rendering for the command-line workflows.

Every function writes one PNG next to the delimited artifact it
illustrates.  The Agg backend is forced so rendering works headless;
figures are closed after saving to keep batch runs at constant memory.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

CRITERIA_NAMES = ("IAE", "IAC", "IACD", "IADEE")

_DPI = 150


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def plot_trajectory(traj, path) -> None:
    """Stacked panels: plant state, control, disturbance vs its estimate."""
    fig, axes = plt.subplots(3, 1, figsize=(8, 7), sharex=True)
    axes[0].plot(traj.t, traj.x[:, 0], label="x1")
    axes[0].plot(traj.t, traj.x[:, 1], label="x2", alpha=0.8)
    axes[0].set_ylabel("state")
    axes[0].legend(loc="upper right")
    axes[1].plot(traj.t, traj.u, color="tab:green")
    axes[1].set_ylabel("u")
    axes[2].plot(traj.t, traj.d, label="d")
    axes[2].plot(traj.t, traj.zhat[:, 2], label="d estimate", alpha=0.8)
    axes[2].set_ylabel("disturbance")
    axes[2].set_xlabel("t [s]")
    axes[2].legend(loc="upper right")
    _save(fig, path)


def plot_sweep(omegas, criteria, path) -> None:
    """Each criterion against the observer bandwidth."""
    omegas = np.asarray(omegas, dtype=float)
    criteria = np.asarray(criteria, dtype=float)
    fig, axes = plt.subplots(2, 2, figsize=(9, 6), sharex=True)
    for i, ax in enumerate(axes.flat):
        ax.plot(omegas, criteria[:, i], marker=".", markersize=3)
        ax.set_title(CRITERIA_NAMES[i])
        if criteria[:, i].min() > 0.0 and criteria[:, i].max() > 50.0 * criteria[:, i].min():
            ax.set_yscale("log")
    for ax in axes[1]:
        ax.set_xlabel("omega0")
    _save(fig, path)


def plot_landscape(table, path) -> None:
    """Cost over the (lambda1, lambda23) slice; predictions beside when present."""
    table = np.asarray(table, dtype=float)
    have_pred = table.shape[1] > 3 and np.isfinite(table[:, 3]).any()
    ncols = 2 if have_pred else 1
    fig, axes = plt.subplots(1, ncols, figsize=(6 * ncols, 5), squeeze=False)
    panels = [(2, "simulated cost")]
    if have_pred:
        panels.append((3, "estimated cost"))
    finite = table[:, 2][np.isfinite(table[:, 2])]
    for ax, (col, title) in zip(axes[0], panels):
        sc = ax.scatter(
            table[:, 0], table[:, 1], c=table[:, col], s=18, cmap="viridis",
            vmin=finite.min() if finite.size else None,
            vmax=finite.max() if finite.size else None,
        )
        ax.set_xlabel("lambda1")
        ax.set_ylabel("lambda2 = lambda3")
        ax.set_title(title)
        fig.colorbar(sc, ax=ax)
    _save(fig, path)


def plot_history(history, path) -> None:
    """Training and validation loss per epoch."""
    hist = np.asarray(history, dtype=float)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.semilogy(hist[:, 0], hist[:, 1], label="train")
    ax.semilogy(hist[:, 0], hist[:, 2], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mse loss")
    ax.legend()
    _save(fig, path)


def plot_margins(report, path) -> None:
    """Observed error norm against its certified envelope."""
    fig, ax = plt.subplots(figsize=(8, 4.5))
    positive = report.observed > 0.0
    ax.semilogy(report.times, np.where(positive, report.observed, np.nan), label="observed")
    env = np.where(report.envelope > 0.0, report.envelope, np.nan)
    ax.semilogy(report.times, env, label="envelope", linestyle="--")
    for seg in report.segments[1:]:
        ax.axvline(report.times[seg.start], color="gray", alpha=0.4, linewidth=0.8)
    ax.set_xlabel("t [s]")
    ax.set_ylabel("norm")
    ax.set_title(report.label)
    ax.legend()
    _save(fig, path)


def plot_paired_costs(baseline, candidate, labels, path) -> None:
    """Per-trial cost pairs with the break-even diagonal."""
    baseline = np.asarray(baseline, dtype=float)
    candidate = np.asarray(candidate, dtype=float)
    fig, ax = plt.subplots(figsize=(5.5, 5.5))
    ax.scatter(baseline, candidate, s=16, alpha=0.8)
    lo = float(min(baseline.min(), candidate.min()))
    hi = float(max(baseline.max(), candidate.max()))
    pad = 0.05 * (hi - lo) if hi > lo else 1.0
    ax.plot([lo - pad, hi + pad], [lo - pad, hi + pad], color="gray", linewidth=0.8)
    ax.set_xlabel(labels[0])
    ax.set_ylabel(labels[1])
    wins = float(np.mean(candidate < baseline))
    ax.set_title(f"{labels[1]} wins {100.0 * wins:.0f}% of trials")
    _save(fig, path)


def plot_tune_table(table, path) -> None:
    """Cost of every evaluated triple against its eigenvalue sum."""
    table = np.asarray(table, dtype=float)
    sums = table[:, :3].sum(axis=1)
    j = table[:, 3]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    plot = ax.semilogy if np.all(j > 0.0) else ax.plot
    plot(sums, j, linestyle="none", marker=".", markersize=3, alpha=0.6)
    best = int(np.argmin(j))
    plot([sums[best]], [j[best]], linestyle="none", marker="o", color="tab:red")
    ax.set_xlabel("lambda1 + lambda2 + lambda3")
    ax.set_ylabel("cost J")
    _save(fig, path)


def plot_criteria_hist(criteria, path) -> None:
    """Distribution of each raw criterion over a dataset."""
    criteria = np.asarray(criteria, dtype=float)
    fig, axes = plt.subplots(2, 2, figsize=(9, 6))
    for i, ax in enumerate(axes.flat):
        ax.hist(criteria[:, i], bins=40, color="tab:blue", alpha=0.85)
        ax.set_title(CRITERIA_NAMES[i])
    _save(fig, path)
