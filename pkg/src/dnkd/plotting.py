"""Report figures written next to the CSV tables."""

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

AXIS_LABELS = {"k": "k (neighbors)", "beta": r"$\beta$", "tau": r"$\tau$"}


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep(summary, axis, path):
    xs = [float(s["value"]) for s in summary]
    ys = [s["median_bleu"] for s in summary]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(range(len(xs)), ys, marker="o")
    ax.set_xticks(range(len(xs)))
    ax.set_xticklabels([f"{x:g}" for x in xs])
    ax.set_xlabel(AXIS_LABELS.get(axis, axis))
    ax.set_ylabel("median test BLEU")
    ax.grid(alpha=0.3)
    _finish(fig, path)


def plot_grad_norms(rows, beta, path, top=8):
    """Mean per-rank gradient norm for each regime, NKD next to DNKD."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 3), sharey=False)
    for ax, regime, title in (
        (axes[0], "le_beta", rf"$1-p_t \leq \beta={beta:g}$"),
        (axes[1], "gt_beta", rf"$1-p_t > \beta={beta:g}$"),
    ):
        sel = [r for r in rows if r["regime"] == regime]
        nkd, dnkd = [], []
        for rank in range(top):
            at = [r for r in sel if r["rank"] == rank]
            nkd.append(sum(r["nkd_norm"] for r in at) / len(at) if at else math.nan)
            dnkd.append(sum(r["dnkd_norm"] for r in at) / len(at) if at else math.nan)
        x = list(range(top))
        ax.bar([i - 0.2 for i in x], nkd, width=0.4, label="NKD")
        ax.bar([i + 0.2 for i in x], dnkd, width=0.4, label="DNKD")
        ax.set_title(f"{title} (n={len({(r['sentence'], r['position']) for r in sel})})")
        ax.set_xlabel("rank by NKD gradient norm")
        ax.set_ylabel(r"mean $|\partial L / \partial z_j|$")
        ax.legend(frameon=False)
    _finish(fig, path)
