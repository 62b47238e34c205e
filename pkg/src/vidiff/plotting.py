"""Static figures for run reports. Uses the non-interactive Agg backend."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "vidiff",
    "svg.fonttype": "none",
}


def _save(fig, path):
    meta = {"Date": None} if str(path).endswith(".svg") else {}
    fig.tight_layout()
    fig.savefig(path, metadata=meta)
    plt.close(fig)
    return path


def loss_trace(losses, path, title="empirical risk"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(np.arange(len(losses)), losses, lw=1.0, color="tab:blue")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(title)
        return _save(fig, path)


def kl_sweep(kappas, median, lower, upper, path):
    """Median rounded KL with an interquartile band against the step size."""
    order = np.argsort(kappas)
    k = np.asarray(kappas)[order]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.fill_between(k, np.asarray(lower)[order], np.asarray(upper)[order],
                        color="tab:blue", alpha=0.2, lw=0)
        ax.plot(k, np.asarray(median)[order], "o-", color="tab:blue", lw=1.2)
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel(r"$\kappa$")
        ax.set_ylabel("KL (rounded)")
        return _save(fig, path)


def time_grid(grid, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.step(np.arange(len(grid.gaps)), grid.gaps, where="post", color="tab:green")
        ax.axvline(grid.n0, color="0.6", lw=0.8, ls="--")
        ax.set_yscale("log")
        ax.set_xlabel("step k")
        ax.set_ylabel(r"$\gamma_k$")
        return _save(fig, path)


def sample_marginals(samples, path, reference_means=None, bins=60):
    """Histogram of each coordinate (first four at most)."""
    samples = np.asarray(samples)
    d = min(samples.shape[1], 4)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, d, figsize=(2.2 * d + 0.6, 2.6), squeeze=False)
        for i, ax in enumerate(axes[0]):
            ax.hist(samples[:, i], bins=bins, density=True, color="tab:gray")
            if reference_means is not None:
                ax.axvline(reference_means[i], color="tab:red", lw=1.0)
            ax.set_xlabel(f"$y_{{{i + 1}}}$")
        return _save(fig, path)


def solver_trace(rows, path):
    it = [r[0] for r in rows]
    res = [max(r[1], 1e-300) for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.semilogy(it, res, color="tab:purple")
        ax.set_xlabel("iteration")
        ax.set_ylabel("residual")
        return _save(fig, path)


def score_errors(labels, values, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(np.arange(len(values)), values, color="tab:orange")
        ax.set_xticks(np.arange(len(values)), labels)
        ax.set_ylabel("score MSE / d")
        return _save(fig, path)
