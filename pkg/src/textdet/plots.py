"""Figures written next to the delimited outputs (loss logs, eval reports, detections)."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Polygon  # noqa: E402

from .detector import LossRecord  # noqa: E402
from .evaluation import EvalReport  # noqa: E402
from .geometry import Detection, OrientedBox  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}

LOSS_FIELDS = ("step", "total", "cls", "loc", "att", "lr", "positives")


def write_loss_csv(path, history: Sequence[LossRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_FIELDS)
        for r in history:
            w.writerow([r.step, f"{r.total:.6g}", f"{r.cls:.6g}", f"{r.loc:.6g}", f"{r.att:.6g}", f"{r.lr:.6g}", r.positives])


def read_loss_csv(path) -> list[LossRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [LossRecord(int(r["step"]), float(r["total"]), float(r["cls"]), float(r["loc"]), float(r["att"]),
                       float(r["lr"]), int(r["positives"])) for r in rows]


def window_means(values: Sequence[float], window: int = 100) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    n = len(v) // window
    return v[: n * window].reshape(n, window).mean(axis=1)


def plot_loss(history: Sequence[LossRecord], path, window: int = 100) -> Path:
    steps = np.array([r.step for r in history])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        for key, colour in (("total", "k"), ("cls", "tab:blue"), ("loc", "tab:orange"), ("att", "tab:green")):
            vals = np.array([getattr(r, key) for r in history])
            if not vals.any():
                continue
            means = window_means(vals, window)
            ax.plot(steps, vals, color=colour, alpha=0.25 if len(means) else 1.0, lw=0.6,
                    label=None if len(means) else key)
            if len(means):
                ax.plot((np.arange(len(means)) + 0.5) * window + steps[0], means, color=colour, lw=1.4, label=key)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def _draw_box(ax, box: OrientedBox, colour, lw=1.0):
    ax.add_patch(Polygon(box.corners(), closed=True, fill=False, edgecolor=colour, lw=lw))


def plot_detections(image: np.ndarray, dets: Sequence[Detection], path, gts: Sequence[OrientedBox] = (),
                    attention: np.ndarray | None = None) -> Path:
    """Overlay detections (red, with scores) and optional ground truth (green) on the image."""
    panels = 2 if attention is not None else 1
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, panels, figsize=(3.2 * panels, 3.2), squeeze=False)
        ax = axes[0, 0]
        ax.imshow(np.clip(image.transpose(1, 2, 0), 0, 1), interpolation="nearest")
        for g in gts:
            _draw_box(ax, g, "lime", 1.2)
        for d in dets:
            _draw_box(ax, d.box, "red")
            ax.text(d.box.cx, d.box.cy - d.box.h / 2 - 1, f"{d.score:.2f}", color="red", fontsize=6,
                    ha="center", va="bottom")
        ax.set_axis_off()
        if attention is not None:
            axes[0, 1].imshow(attention, cmap="magma", vmin=0, vmax=1)
            axes[0, 1].set_title("text attention")
            axes[0, 1].set_axis_off()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_eval(report: EvalReport, path, names: Sequence[str] | None = None) -> Path:
    """Per-image precision and recall bars with the overall values as lines."""
    n = len(report.per_image)
    prec = [len(m.pairs) / m.n_det if m.n_det else 0.0 for m in report.per_image]
    rec = [len(m.pairs) / m.n_gt if m.n_gt else 0.0 for m in report.per_image]
    x = np.arange(n)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.25 * n + 1.5), 3.0))
        ax.bar(x - 0.2, prec, 0.4, label="precision", color="tab:blue")
        ax.bar(x + 0.2, rec, 0.4, label="recall", color="tab:orange")
        ax.axhline(report.precision, color="tab:blue", ls="--", lw=0.8)
        ax.axhline(report.recall, color="tab:orange", ls="--", lw=0.8)
        ax.set_ylim(0, 1.05)
        ax.set_xticks(x)
        ax.set_xticklabels(names if names else [str(i) for i in x], rotation=90)
        ax.set_title(f"P {report.precision:.3f}  R {report.recall:.3f}  F {report.f_measure:.3f}")
        ax.legend(frameon=False, loc="lower right")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
