"""Figure rendering for the command-line report path.

Everything draws through the Agg backend so the tools stay headless,
and PNG metadata is stripped so repeated runs on the same inputs
produce identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "plot_trajectory",
    "plot_adjoints",
    "plot_residuals",
    "plot_game",
    "plot_bench",
]

_SAVE = {"dpi": 110, "metadata": {"Software": None}}
_FLOOR = 1e-18  # display floor so exact zeros survive the log axes


def _finish(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def plot_trajectory(states, controls, path, name: str = "") -> Path:
    """States (T+1, n) on top, controls (T, m) as a step plot below."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7.0, 5.4), sharex=True,
                                   constrained_layout=True)
    ts = np.arange(states.shape[0])
    for i in range(states.shape[1]):
        ax1.plot(ts, states[:, i], lw=1.4, label=f"x{i + 1}")
    ax1.set_ylabel("state")
    ax1.legend(loc="best", fontsize=8)
    if name:
        ax1.set_title(name)
    tu = np.arange(controls.shape[0])
    for i in range(controls.shape[1]):
        ax2.step(tu, controls[:, i], where="post", lw=1.2, label=f"u{i + 1}")
    ax2.set_xlabel("t")
    ax2.set_ylabel("control")
    ax2.legend(loc="best", fontsize=8)
    return _finish(fig, path)


def plot_adjoints(lam, path, name: str = "") -> Path:
    """Adjoint rows lam_1..lam_T against their stage index."""
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    fig, ax = plt.subplots(figsize=(7.0, 3.4), constrained_layout=True)
    ts = np.arange(1, lam.shape[0] + 1)
    for i in range(lam.shape[1]):
        ax.plot(ts, lam[:, i], lw=1.4, label=f"adjoint {i + 1}")
    ax.set_xlabel("t")
    ax.set_ylabel("adjoint")
    ax.legend(loc="best", fontsize=8)
    if name:
        ax.set_title(name)
    return _finish(fig, path)


def _log_panel(ax, rows, start, label):
    norms = np.max(np.abs(np.atleast_2d(rows)), axis=1)
    ts = np.arange(start, start + norms.size)
    ax.semilogy(ts, np.maximum(norms, _FLOOR), lw=1.2)
    ax.set_ylabel(label)


def plot_residuals(path, name: str = "", stationarity=None, recursion=None,
                   profile=None) -> Path:
    """Per-stage residual norms (log scale) plus the decay-fit profile."""
    panels = [(stationarity is not None, "stationarity"),
              (recursion is not None, "recursion"),
              (profile is not None, "profile")]
    k = sum(1 for on, _ in panels if on)
    if k == 0:
        raise ValueError("nothing to plot")
    fig, axes = plt.subplots(k, 1, figsize=(7.0, 2.1 * k + 1.0), sharex=False,
                             constrained_layout=True, squeeze=False)
    axes = axes.ravel()
    idx = 0
    if stationarity is not None:
        _log_panel(axes[idx], stationarity, 0, "|stationarity|")
        if name:
            axes[idx].set_title(name)
        idx += 1
    if recursion is not None:
        _log_panel(axes[idx], recursion, 1, "|recursion|")
        idx += 1
    if profile is not None:
        ax = axes[idx]
        norms = np.maximum(profile.norms, _FLOOR)
        ax.semilogy(profile.stages, norms, lw=1.2, label="profile")
        if 0.0 < profile.fitted_rate < 1.0 and norms.size:
            anchor = max(float(norms[0]), _FLOOR)
            fit = anchor * profile.fitted_rate ** (profile.stages - profile.stages[0])
            ax.semilogy(profile.stages, np.maximum(fit, _FLOOR), "--", lw=1.0,
                        label=f"rate {profile.fitted_rate:.4f}")
        ax.set_ylabel("|profile|")
        ax.legend(loc="best", fontsize=8)
    axes[-1].set_xlabel("t")
    return _finish(fig, path)


def plot_game(states, per_player_controls, path, name: str = "") -> Path:
    """Shared state path plus every player's control path."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7.0, 5.4), sharex=True,
                                   constrained_layout=True)
    ts = np.arange(states.shape[0])
    for i in range(states.shape[1]):
        ax1.plot(ts, states[:, i], lw=1.4, label=f"x{i + 1}")
    ax1.set_ylabel("state")
    ax1.legend(loc="best", fontsize=8)
    if name:
        ax1.set_title(name)
    for j, controls in enumerate(per_player_controls):
        controls = np.atleast_2d(np.asarray(controls, dtype=float))
        tu = np.arange(controls.shape[0])
        for i in range(controls.shape[1]):
            ax2.step(tu, controls[:, i], where="post", lw=1.2,
                     label=f"player {j + 1} u{i + 1}")
    ax2.set_xlabel("t")
    ax2.set_ylabel("control")
    ax2.legend(loc="best", fontsize=8)
    return _finish(fig, path)


def plot_bench(rows, path) -> Path:
    """Residual sups per benchmark on a log scale, one group per case."""
    names = [row["name"] for row in rows]
    keys = ("stationarity_sup", "recursion_sup", "tc_sup")
    fig, ax = plt.subplots(figsize=(7.0, 3.6), constrained_layout=True)
    width = 0.25
    xs = np.arange(len(names))
    for k, key in enumerate(keys):
        vals = np.array([max(float(row[key]), _FLOOR) for row in rows])
        ax.bar(xs + (k - 1) * width, vals, width, label=key.replace("_sup", ""))
    ax.set_yscale("log")
    ax.set_xticks(xs)
    ax.set_xticklabels(names, fontsize=8)
    ax.set_ylabel("residual sup")
    ax.legend(loc="best", fontsize=8)
    return _finish(fig, path)
