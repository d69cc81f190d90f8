"""Figure rendering for CLI reports (headless, files only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curve(history, path) -> None:
    steps = [s for s, _ in history]
    losses = [l for _, l in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("flow loss")
    ax.set_yscale("log")
    ax.set_title("training loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_samples(samples: np.ndarray, path, data: np.ndarray | None = None, title: str = "samples") -> None:
    samples = np.asarray(samples)
    fig, ax = plt.subplots(figsize=(6, 6))
    if samples.shape[1] == 1:
        ax.hist(samples[:, 0], bins=60, density=True, alpha=0.7, label="generated")
        if data is not None:
            ax.hist(data[:, 0], bins=60, density=True, alpha=0.4, label="data")
        ax.legend()
    else:
        if data is not None:
            ax.scatter(data[:, 0], data[:, 1], s=4, alpha=0.3, label="data")
        ax.scatter(samples[:, 0], samples[:, 1], s=4, alpha=0.5, label="generated")
        ax.legend()
        ax.set_aspect("equal")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_trajectories(traj, path, max_rows: int = 80, title: str = "trajectories") -> None:
    states = traj.states
    times = traj.times
    dim = states[0].shape[1]
    n = min(states[0].shape[0], max_rows)
    fig, ax = plt.subplots(figsize=(6, 6))
    if dim == 1:
        for i in range(n):
            ax.plot(times, [s[i, 0] for s in states], lw=0.7, alpha=0.6)
        ax.set_xlabel("t")
        ax.set_ylabel("z")
    else:
        for i in range(n):
            xs = [s[i, 0] for s in states]
            ys = [s[i, 1] for s in states]
            ax.plot(xs, ys, lw=0.7, alpha=0.5)
        ax.scatter([s[0] for s in states[0][:n]], [s[1] for s in states[0][:n]], s=8, c="tab:blue", label="z(0)")
        ax.scatter([s[0] for s in states[-1][:n]], [s[1] for s in states[-1][:n]], s=8, c="tab:red", label="z(1)")
        ax.legend()
        ax.set_aspect("equal")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_bench_bars(rows, path) -> None:
    labels = [f"{r.method}\n(nfe={r.nfe})" for r in rows]
    secs = [r.seconds_median for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(labels, secs, color="tab:blue", alpha=0.8)
    ax.set_ylabel("median seconds")
    ax.set_title("sampling wall time")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_straightness_compare(before: float, after: float, path) -> None:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.bar(["before", "after"], [before, after], color=["tab:gray", "tab:green"])
    ax.set_ylabel("straightness (lower is straighter)")
    ax.set_title("rectification effect")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
