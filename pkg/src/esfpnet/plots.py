"""Figure rendering for reports.

Every CLI report path saves one or more PNG figures next to its delimited
output. The Agg backend keeps this headless-safe.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_training_curves(log, path) -> Path:
    """Loss components and validation mDice against epoch."""
    epochs = [r.epoch for r in log]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, [r.loss_total for r in log], label="total loss", color="tab:red")
    ax.plot(epochs, [r.loss_iou for r in log], label="weighted IoU", color="tab:orange",
            linestyle="--", linewidth=1)
    ax.plot(epochs, [r.loss_bce for r in log], label="weighted BCE", color="tab:purple",
            linestyle="--", linewidth=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    twin = ax.twinx()
    twin.plot(epochs, [r.val_mdice for r in log], label="val mDice", color="tab:blue")
    twin.set_ylabel("validation mDice")
    twin.set_ylim(0, 1)
    handles1, labels1 = ax.get_legend_handles_labels()
    handles2, labels2 = twin.get_legend_handles_labels()
    ax.legend(handles1 + handles2, labels1 + labels2, loc="center right", fontsize=8)
    ax.set_title("training curves")
    return _finish(fig, path)


def save_metrics_figure(rows, path) -> Path:
    """Grouped bars of the overlap/structure metrics per report row."""
    names = [name for name, _ in rows]
    metric_keys = ("m_dice", "m_iou", "s_alpha", "e_phi", "mae")
    fig, ax = plt.subplots(figsize=(max(7, 1.4 * len(names)), 4))
    width = 0.8 / len(metric_keys)
    for k, key in enumerate(metric_keys):
        values = [report.aggregates()[key] for _, report in rows]
        offset = (k - (len(metric_keys) - 1) / 2) * width
        ax.bar([i + offset for i in range(len(names))], values, width, label=key)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.grid(axis="y", alpha=0.3)
    ax.legend(fontsize=8)
    ax.set_title("evaluation metrics")
    return _finish(fig, path)


def save_latency_figure(report, path) -> Path:
    """Per-stage mean latencies with the FPS headline."""
    stages = list(report.stage_means_ms)
    values = [report.stage_means_ms[s] for s in stages]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(stages, values, color="tab:cyan")
    ax.set_ylabel("mean latency (ms)")
    ax.axhline(report.latency_p50_ms, color="tab:gray", linestyle="--",
               linewidth=1, label=f"p50 total {report.latency_p50_ms:.1f} ms")
    ax.axhline(report.latency_p95_ms, color="tab:red", linestyle="--",
               linewidth=1, label=f"p95 total {report.latency_p95_ms:.1f} ms")
    ax.legend(fontsize=8)
    ax.set_title(
        f"stream throughput: {report.mean_fps:.1f} FPS over {report.frame_count} frames")
    return _finish(fig, path)


def save_complexity_figure(reports, path) -> Path:
    """Parameters and GFLOPs per variant, side by side."""
    names = [r.variant_id for r in reports]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 4))
    ax1.bar(names, [r.params_million for r in reports], color="tab:blue")
    ax1.set_ylabel("parameters (M)")
    ax1.grid(axis="y", alpha=0.3)
    ax2.bar(names, [r.gflops for r in reports], color="tab:green")
    ax2.set_ylabel("GFLOPs")
    ax2.grid(axis="y", alpha=0.3)
    fig.suptitle("model complexity")
    return _finish(fig, path)
