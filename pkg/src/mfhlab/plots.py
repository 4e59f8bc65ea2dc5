"""Figures rendered beside the delimited reports.

PNG via the Agg backend only; no display server is assumed and the output
bytes are deterministic for identical inputs, which keeps re-runs
idempotent like every other artifact.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  backend pinned first


def save_task_curves(report, path) -> None:
    """Train (dashed) and test (solid) metric per task over epochs."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    cycle = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for i, curve in enumerate(report.tasks):
        color = cycle[i % len(cycle)]
        ax.plot(report.epochs, curve.test, color=color, label=curve.name)
        ax.plot(report.epochs, curve.train, color=color, linestyle="--",
                alpha=0.6)
    metrics = sorted({c.metric for c in report.tasks})
    ax.set_xlabel("epoch")
    ax.set_ylabel(" / ".join(metrics))
    ax.set_title("per-task metric (solid test, dashed train)")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_region_errors(report, path) -> None:
    """Final-epoch train/test error and gap per routing-facet partition."""
    names = [r.name for r in report.regions]
    train = [r.train[-1] for r in report.regions]
    test = [r.test[-1] for r in report.regions]
    x = range(len(names))
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.38
    ax.bar([i - width / 2 for i in x], train, width, label="train")
    ax.bar([i + width / 2 for i in x], test, width, label="test")
    for i, (tr, te) in enumerate(zip(train, test)):
        if tr is not None and te is not None:
            ax.annotate(f"gap {te - tr:+.3g}", (i, max(tr, te)),
                        ha="center", va="bottom", fontsize=8)
    ax.set_xticks(list(x))
    ax.set_xticklabels(names)
    ax.set_ylabel("error (mse or 1-auc)")
    ax.set_title("per-region error at the final epoch")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_comparison(regions, by_config, path) -> None:
    """Median per-region test error side by side, one bar group per region.

    by_config maps a config name to {"test": {region: value},
    "gap": {region: value}}; gaps are drawn in a second panel.
    """
    names = list(by_config)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, key, title in ((axes[0], "test", "median test error"),
                           (axes[1], "gap", "median test-train gap")):
        width = 0.8 / max(len(names), 1)
        for j, cfg_name in enumerate(names):
            vals = [by_config[cfg_name][key].get(r) for r in regions]
            xs = [i + (j - (len(names) - 1) / 2) * width
                  for i in range(len(regions))]
            ax.bar(xs, [v if v is not None else 0.0 for v in vals],
                   width, label=cfg_name)
        ax.set_xticks(range(len(regions)))
        ax.set_xticklabels(regions)
        ax.set_title(title)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
