"""Report figures rendered to PNG with the Agg backend."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def explanation_figure(image: np.ndarray, explanation, path) -> None:
    """Input image next to each concept's heatmap with presence outline and contribution."""
    c = len(explanation.relevance)
    fig, axes = plt.subplots(1, c + 1, figsize=(2.2 * (c + 1), 2.6))
    axes[0].imshow(np.clip(image, 0, 1), interpolation="nearest")
    axes[0].set_title(f"pred {explanation.predicted_label}", fontsize=9)
    for j in range(c):
        ax = axes[j + 1]
        ax.imshow(np.clip(image, 0, 1), interpolation="nearest")
        ax.imshow(explanation.heatmaps[j], cmap="magma", alpha=0.55, interpolation="bilinear")
        ax.contour(explanation.presence_upsampled[j].astype(float), levels=[0.5],
                   colors="cyan", linewidths=1.0)
        r = explanation.relevance[j]
        if explanation.percentages is not None:
            label = f"c{j}: {explanation.percentages[j]:+.0f}%"
        else:
            label = f"c{j}: r={r:+.3g}"
        ax.set_title(label, fontsize=9, color="tab:green" if r >= 0 else "tab:red")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    _save(fig, path)


def agreement_figure(black_box_acc: float, rows: list[tuple[str, float]], path) -> None:
    """Bar chart of agreement accuracies (percent), black-box test accuracy as a line."""
    fig, ax = plt.subplots(figsize=(4, 3))
    names = [n for n, _ in rows]
    vals = [v for _, v in rows]
    ax.bar(names, vals, color=["tab:blue", "tab:gray"][:len(rows)])
    for i, v in enumerate(vals):
        ax.text(i, v + 1, f"{v:.1f}", ha="center", fontsize=9)
    ax.axhline(100 * black_box_acc, color="k", ls="--", lw=0.8, label="black-box test acc")
    ax.set_ylim(0, 110)
    ax.set_ylabel("agreement with black-box (%)")
    ax.legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    _save(fig, path)


def localization_figure(report, path) -> None:
    """Per-concept mean best IoU against the 95th percentile of the translated-mask null."""
    cs = report.concepts
    fig, ax = plt.subplots(figsize=(max(4, 0.35 * len(cs) + 1), 3))
    x = np.arange(len(cs))
    ax.bar(x, [c.mean_iou for c in cs],
           color=["tab:green" if c.exceeds_null else "tab:gray" for c in cs])
    ax.scatter(x, [c.null_p95 for c in cs], marker="_", s=120, color="k", label="null p95")
    ax.set_xticks(x)
    ax.set_xticklabels([f"{c.class_index}.{c.concept}" for c in cs], rotation=90, fontsize=7)
    ax.set_ylabel("mean best IoU")
    ax.set_title(f"{100 * report.fraction_exceeding:.0f}% of concepts above null (proxy)",
                 fontsize=9)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def loss_figure(history: list[dict], keys: list[str], path) -> None:
    fig, axes = plt.subplots(1, len(keys), figsize=(2.6 * len(keys), 2.4))
    axes = np.atleast_1d(axes)
    ep = [h["epoch"] for h in history]
    for ax, key in zip(axes, keys):
        ax.plot(ep, [h[key] for h in history], lw=1.2)
        ax.set_title(key, fontsize=9)
        ax.set_xlabel("epoch", fontsize=8)
        ax.tick_params(labelsize=7)
    fig.tight_layout()
    _save(fig, path)
