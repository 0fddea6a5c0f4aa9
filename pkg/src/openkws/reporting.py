"""Delimited outputs and report figures.

Score files are TSV with full-precision scores so reports are exactly
recomputable from them; figures are rendered to PNG next to the tables.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .metrics import TrialSet  # noqa: E402


def write_jsonl(path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True))
            fh.write("\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_report(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_scores(path, trial_set: TrialSet) -> None:
    if trial_set.scores is None:
        raise ValueError("trial set has not been scored")
    with open(path, "w") as fh:
        fh.write("trial_id\tkeyword_id\tlabel\tscore\n")
        for i, (trial, score) in enumerate(zip(trial_set.trials, trial_set.scores)):
            fh.write(f"{i}\t{trial.keyword_id}\t{trial.label}\t{float(score)!r}\n")


def read_scores(path) -> tuple[np.ndarray, np.ndarray]:
    """(labels, scores) from a score file, full precision."""
    labels, scores = [], []
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        li, si = header.index("label"), header.index("score")
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            labels.append(int(parts[li]))
            scores.append(float(parts[si]))
    return np.array(labels, dtype=int), np.array(scores, dtype=np.float64)


def training_curves(epoch_rows: list[dict], path) -> None:
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.2))
    epochs = [r["epoch"] for r in epoch_rows]
    for key in ("total", "l_utt", "l_key", "l_mm", "l_phn"):
        values = [r[key] for r in epoch_rows]
        if any(v != 0 for v in values):
            ax_loss.plot(epochs, values, label=key)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=7)
    ax_acc.plot(epochs, [r["modality_acc"] for r in epoch_rows], color="tab:red")
    ax_acc.axhline(0.5, ls=":", color="gray")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("modality accuracy")
    ax_acc.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def score_figure(trial_set: TrialSet, report: dict, path) -> None:
    labels = trial_set.labels()
    scores = np.asarray(trial_set.scores)
    fig, (ax_hist, ax_roc) = plt.subplots(1, 2, figsize=(9, 3.2))
    bins = np.linspace(-1, 1, 60)
    ax_hist.hist(scores[labels == 0], bins=bins, alpha=0.6, density=True,
                 label="non-match")
    ax_hist.hist(scores[labels == 1], bins=bins, alpha=0.6, density=True,
                 label="match")
    ax_hist.set_xlabel("cosine score")
    ax_hist.legend(fontsize=7)
    order = np.argsort(-scores, kind="mergesort")
    tp = np.cumsum(labels[order])
    fp = np.cumsum(1 - labels[order])
    ax_roc.plot(fp / max(fp[-1], 1), tp / max(tp[-1], 1), lw=1.2)
    ax_roc.plot([0, 1], [1, 0], ls=":", color="gray", lw=0.8)
    ax_roc.scatter([report["eer"]], [1 - report["eer"]], s=18, color="tab:red",
                   zorder=3, label=f"EER={report['eer']:.3f}")
    ax_roc.set_xlabel("false accept rate")
    ax_roc.set_ylabel("true positive rate")
    ax_roc.set_title(f"AP={report['ap']:.3f}  AUC={report['auc']:.3f}", fontsize=9)
    ax_roc.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_ladder_table(path, rows: list[dict]) -> None:
    cols = ["rung", "n_seeds", "ap_mean", "ap_std", "eer_mean", "eer_std",
            "auc_mean", "auc_std"]
    with open(path, "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for row in rows:
            fh.write("\t".join(
                str(row[c]) if c in ("rung", "n_seeds") else f"{row[c]:.6f}"
                for c in cols) + "\n")


def ladder_figure(rows: list[dict], path) -> None:
    if not rows:
        return
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    names = [r["rung"] for r in rows]
    means = [r["ap_mean"] for r in rows]
    stds = [r["ap_std"] for r in rows]
    ax.bar(range(len(rows)), means, yerr=stds, capsize=3, color="tab:blue",
           alpha=0.8)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("average precision")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
