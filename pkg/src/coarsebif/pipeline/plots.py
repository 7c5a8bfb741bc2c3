"""Bifurcation-diagram figures rendered next to the columnar exports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..io_utils import read_columns  # noqa: E402

_SAVE = {"dpi": 120, "metadata": {"Software": None}}


def _segments(eps, val, stable):
    """Split a branch into runs of equal stability, sharing the joining point."""
    cuts = np.flatnonzero(np.diff(stable)) + 1
    bounds = np.concatenate([[0], cuts, [len(eps)]])
    for a, b in zip(bounds[:-1], bounds[1:]):
        stop = min(b + 1, len(eps))
        yield eps[a:stop], val[a:stop], bool(stable[a])


def _draw(ax, eps, val, stable, color, label):
    first = True
    for e, v, st in _segments(eps, val, stable):
        ax.plot(e, v, "-" if st else "--", color=color, lw=1.5, label=label if first else None)
        first = False


def plot_branch(branch, folds, hopfs, path, title=""):
    eps = branch.epsilon
    stable = np.array([p.stable for p in branch], dtype=int)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, var in zip(axes, ("mean_u", "mean_v")):
        val = np.array([getattr(p, var) for p in branch])
        _draw(ax, eps, val, stable, "k", None)
        for f in folds:
            ax.axvline(f.epsilon, color="tab:blue", lw=0.8, ls=":")
        for h in hopfs:
            ax.axvline(h.epsilon, color="tab:red", lw=0.8, ls=":")
        ax.set_xlabel("epsilon")
        ax.set_ylabel(f"<{var[-1]}>")
    fig.suptitle(f"{title} (solid: stable, dashed: unstable)")
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def plot_overview(branch_dirs: dict, path, var: str = "mean_u"):
    fig, ax = plt.subplots(figsize=(6, 4.5))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for (key, d), c in zip(sorted(branch_dirs.items()), colors):
        cols = read_columns(d / f"diagram_{var}.csv")
        _draw(ax, cols["epsilon"], cols[var], cols["stable"].astype(int), c, key)
    ax.set_xlabel("epsilon")
    ax.set_ylabel(f"<{var[-1]}>")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
