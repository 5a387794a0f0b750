"""Matplotlib figure rendering for evaluation reports and screening curves."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_tau_histogram(report, path):
    taus = [r.tau for r in report.records]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(taus, bins=np.linspace(-1, 1, 21), color="#4878b0",
            edgecolor="white")
    ax.axvline(report.kendall, color="#c44e52", linestyle="--",
               label=f"mean = {report.kendall:.2f}")
    ax.set_xlabel("Kendall tau per list")
    ax.set_ylabel("lists")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_metric_bars(report, path):
    names = ["FRA", "PRA", "PAU", "P@1"]
    vals = [report.fra, report.pra, report.pau, report.p_at_1]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(names, vals, color="#4878b0")
    for x, v in zip(names, vals):
        ax.text(x, v + 1, f"{v:.1f}", ha="center", fontsize=9)
    ax.set_ylim(0, 105)
    ax.set_ylabel("percent")
    ax.set_title(f"ranking metrics over {report.n_lists} lists "
                 f"(Ktau = {report.kendall:.2f})")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_screening_curves(hit_rate, recall, top_m, path):
    n = len(hit_rate)
    xs = np.arange(1, n + 1)
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    axes[0].step(xs, hit_rate, where="post", color="#4878b0")
    axes[0].set_xlabel("candidates screened")
    axes[0].set_ylabel("top-1 hit rate")
    axes[0].set_ylim(-0.05, 1.05)
    axes[1].step(xs, recall, where="post", color="#55a868",
                 label="ranked screening")
    axes[1].plot(xs, xs / n, color="grey", linestyle=":", label="random")
    axes[1].set_xlabel("candidates screened")
    axes[1].set_ylabel(f"top-{top_m} recall")
    axes[1].set_ylim(-0.05, 1.05)
    axes[1].legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
