"""Figure rendering for report paths. All figures go to files (Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def save_loss_curves(history: list[dict], path: str | Path) -> Path:
    """Loss (and PCK when recorded) per epoch."""
    path = Path(path)
    epochs = [h["epoch"] for h in history]
    losses = [h["loss"] for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, losses, marker="o", ms=3, label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    pck = [(h["epoch"], h["pck"]) for h in history if "pck" in h]
    if pck:
        ax2 = ax.twinx()
        ax2.plot(*zip(*pck), color="tab:green", marker="s", ms=3, label="PCK")
        ax2.set_ylabel("PCK", color="tab:green")
        ax2.set_ylim(0, 1.05)
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_bench_chart(report, path: str | Path) -> Path:
    """Speedup per problem size."""
    path = Path(path)
    labels = [f"{r.m}x{r.n}x{r.k}" for r in report.rows]
    speedups = [r.speedup if r.checksum_ok else 0.0 for r in report.rows]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(labels)), 4))
    bars = ax.bar(labels, speedups, color="tab:blue")
    for bar, r in zip(bars, report.rows):
        if not r.checksum_ok:
            bar.set_color("tab:red")
    ax.axhline(1.0, color="gray", lw=1, ls="--")
    ax.set_ylabel("popcount speedup over project float GEMM")
    ax.set_xlabel("m x n x k")
    plt.setp(ax.get_xticklabels(), rotation=30, ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_compression_chart(report, path: str | Path) -> Path:
    """Stacked file composition next to the dense baseline."""
    path = Path(path)
    s = report.sizes
    fig, ax = plt.subplots(figsize=(6, 4))
    parts = [
        ("packed words", s.packed_word_bytes),
        ("real weights", s.real_weight_bytes),
        ("alphas", s.alpha_bytes),
        ("batch norm", s.bn_bytes),
        ("header", s.header_bytes),
    ]
    bottom = 0.0
    for label, val in parts:
        ax.bar("packed file", val / 1e6, bottom=bottom, label=label)
        bottom += val / 1e6
    ax.bar("dense w/ biases", report.baseline_with_bias / 1e6, color="tab:gray")
    ax.set_ylabel("MB")
    ax.set_title(
        f"weights ratio {report.ratio_weights:.1f}x, "
        f"whole file {report.ratio_file_with_bias:.1f}x"
    )
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
