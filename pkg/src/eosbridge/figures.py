"""Figure rendering for metrics and report files. Headless backend; every
function writes a PNG next to the delimited data it plots."""

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .errors import DataError  # noqa: E402
from .report import AGGREGATE_TASK, read_report  # noqa: E402

_LOSS_KEYS = ("mntp", "mae", "infonce", "total")


def render_metrics(metrics_csv, out_png) -> Path:
    """Loss curves over optimizer steps, one panel per training stage."""
    with open(metrics_csv, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise DataError(f"no metric rows in {metrics_csv}")
    stages = sorted({int(r["stage"]) for r in rows})
    fig, axes = plt.subplots(1, len(stages), figsize=(4.2 * len(stages), 3.2),
                             squeeze=False)
    for ax, stage in zip(axes[0], stages):
        sub = [r for r in rows if int(r["stage"]) == stage]
        steps = [int(r["step"]) for r in sub]
        for key in _LOSS_KEYS:
            ys = [float(r[key]) for r in sub]
            if any(y != 0.0 for y in ys):
                ax.plot(steps, ys, label=key, linewidth=1.2)
        ax.set_title(f"stage {stage}")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(fontsize=8)
    fig.tight_layout()
    out = Path(out_png)
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out


def render_report(report_csv, out_png) -> Path:
    """Grouped bars: Precision@1 per arm and meta-task."""
    rows = read_report(report_csv)
    if not rows:
        raise DataError(f"no report rows in {report_csv}")
    arms = list(dict.fromkeys(r["arm"] for r in rows))
    tasks = sorted({r["meta_task"] for r in rows} - {AGGREGATE_TASK})
    tasks.append(AGGREGATE_TASK)
    scores = {(r["arm"], r["meta_task"]): r["p_at_1"] for r in rows}
    fig, ax = plt.subplots(figsize=(1.6 + 1.1 * len(arms) * len(tasks) / 3,
                                    3.4))
    width = 0.8 / len(tasks)
    for ti, task in enumerate(tasks):
        xs = [ai + ti * width for ai in range(len(arms))]
        ys = [scores.get((arm, task), 0.0) for arm in arms]
        ax.bar(xs, ys, width=width, label=task)
    ax.set_xticks([ai + 0.4 - width / 2 for ai in range(len(arms))])
    ax.set_xticklabels(arms, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("Precision@1")
    ax.set_ylim(0.0, 1.0)
    ax.legend(fontsize=8)
    fig.tight_layout()
    out = Path(out_png)
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out


def render_sweep(report_csv, out_png) -> Path:
    """Precision@1 against the Block-B masking ratio, one line per
    meta-task. Arm labels must look like ``ratio-0.5``."""
    rows = read_report(report_csv)
    points = {}
    for r in rows:
        label = r["arm"]
        if not label.startswith("ratio-"):
            raise DataError(f"not a sweep arm label: {label!r}")
        ratio = float(label.split("-", 1)[1])
        points.setdefault(r["meta_task"], []).append((ratio, r["p_at_1"]))
    if not points:
        raise DataError(f"no report rows in {report_csv}")
    fig, ax = plt.subplots(figsize=(4.6, 3.4))
    for task in sorted(points):
        pts = sorted(points[task])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                label=task,
                linewidth=2.0 if task == AGGREGATE_TASK else 1.2)
    ax.set_xlabel("Block-B masking ratio")
    ax.set_ylabel("Precision@1")
    ax.legend(fontsize=8)
    fig.tight_layout()
    out = Path(out_png)
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out
