"""Figure and CSV rendering for the train and eval report paths.

Reports are written next to the delimited output: CSV files carry the
numbers, PNG figures show the curves.  The Agg backend keeps rendering
headless.
"""

from __future__ import annotations

import csv
import os
from typing import Dict, List, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def write_train_report(out_dir, history: Sequence[Tuple[int, float, float]]) -> List[str]:
    """history rows are (step, loss, teacher-forced accuracy)."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "loss.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "accuracy"])
        for step, loss, acc in history:
            w.writerow([step, repr(loss), repr(acc)])

    steps = [h[0] for h in history]
    fig, (ax_loss, ax_acc) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax_loss.plot(steps, [h[1] for h in history], color="tab:red")
    ax_loss.set_ylabel("token cross-entropy")
    ax_loss.grid(True, alpha=0.3)
    ax_acc.plot(steps, [h[2] for h in history], color="tab:blue")
    ax_acc.set_ylabel("teacher-forced accuracy")
    ax_acc.set_xlabel("step")
    ax_acc.set_ylim(0.0, 1.05)
    ax_acc.grid(True, alpha=0.3)
    fig.tight_layout()
    png_path = os.path.join(out_dir, "loss_curve.png")
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [csv_path, png_path]


def write_eval_report(out_dir, bleu: float, cider: float,
                      per_image: Dict[str, float],
                      lengths: Dict[str, Tuple[int, int]]) -> List[str]:
    """per_image maps id -> CIDEr-D; lengths maps id -> (candidate tokens,
    first-reference tokens)."""
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    with open(metrics_path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        w.writerow(["BLEU-4", repr(bleu)])
        w.writerow(["CIDEr-D", repr(cider)])

    per_image_path = os.path.join(out_dir, "per_image.csv")
    with open(per_image_path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "cider_d", "candidate_len", "reference_len"])
        for rid in sorted(per_image):
            clen, rlen = lengths[rid]
            w.writerow([rid, repr(per_image[rid]), clen, rlen])

    ids = sorted(per_image)
    fig, (ax_bar, ax_len) = plt.subplots(1, 2, figsize=(11, 4))
    ax_bar.bar(range(len(ids)), [per_image[r] for r in ids], color="tab:green")
    ax_bar.set_xticks(range(len(ids)))
    ax_bar.set_xticklabels(ids, rotation=60, ha="right", fontsize=7)
    ax_bar.set_ylabel("CIDEr-D")
    ax_bar.set_title(f"corpus CIDEr-D {cider:.3f}, BLEU-4 {bleu:.3f}")
    ax_len.scatter([lengths[r][1] for r in ids], [lengths[r][0] for r in ids],
                   s=18, alpha=0.7)
    lim = max((max(v) for v in lengths.values()), default=1) + 1
    ax_len.plot([0, lim], [0, lim], linestyle="--", color="gray", linewidth=1)
    ax_len.set_xlabel("reference length")
    ax_len.set_ylabel("candidate length")
    ax_len.set_title("caption lengths")
    fig.tight_layout()
    png_path = os.path.join(out_dir, "metrics.png")
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [metrics_path, per_image_path, png_path]
