"""Trial scoring and retrieval metrics for imbalanced verification trials.

Average precision uses pessimistic tie handling (negatives rank first
within a tie). The equal-error rate is the crossing of the ROC convex
hull with the anti-diagonal, computed with integer hull arithmetic so it
is exact and deterministic. AUC is the pair-ranking statistic with ties
counted half.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .batching import DTYPE
from .encoders import gap_pool_batch


@dataclass
class Trial:
    """One (enrolled keyword, test utterance) pair with a match label."""

    keyword_id: int
    utterance_id: int
    label: int
    phonemes: tuple[int, ...] | None = None


@dataclass
class TrialSet:
    trials: list[Trial]
    scores: np.ndarray | None = None
    with_replacement: bool = False

    def __post_init__(self):
        if self.scores is not None and len(self.scores) != len(self.trials):
            raise ValueError("scores must align 1:1 with trials")

    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.trials], dtype=int)

    def __len__(self) -> int:
        return len(self.trials)


def _validate(scores, labels, need_pos=True, need_neg=True):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if need_pos and n_pos == 0:
        raise ValueError("metric undefined without positive trials")
    if need_neg and n_neg == 0:
        raise ValueError("metric undefined without negative trials")
    return scores, labels, n_pos, n_neg


def average_precision(scores, labels) -> float:
    """Mean precision over positive ranks, scores descending.

    Within tied scores negatives are ranked first, so the value is
    deterministic and never flattered by tie ordering.
    """
    scores, labels, n_pos, _ = _validate(scores, labels, need_neg=False)
    order = np.lexsort((labels, -scores))
    hits = 0
    total = 0.0
    for rank, idx in enumerate(order, start=1):
        if labels[idx]:
            hits += 1
            total += hits / rank
    return total / n_pos


def _roc_staircase(scores, labels) -> list[tuple[int, int]]:
    """Integer (false-accept, true-positive) counts per unique threshold.

    Points run from accept-nothing (0, 0) to accept-everything (Nn, Np),
    one point per unique score, keeping the best true-positive count for
    each false-accept count.
    """
    order = np.argsort(-scores, kind="mergesort")
    s_sorted = scores[order]
    l_sorted = labels[order]
    points = [(0, 0)]
    fa = tp = 0
    n = len(scores)
    for i in range(n):
        tp += int(l_sorted[i])
        fa += int(1 - l_sorted[i])
        if i + 1 == n or s_sorted[i + 1] != s_sorted[i]:
            if points[-1][0] == fa:
                points[-1] = (fa, tp)
            else:
                points.append((fa, tp))
    return points


def _upper_hull(points: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Upper convex hull of integer points sorted by x; exact arithmetic."""
    hull: list[tuple[int, int]] = []
    for p in points:
        while len(hull) >= 2:
            ox, oy = hull[-2]
            ax, ay = hull[-1]
            cross = (ax - ox) * (p[1] - oy) - (ay - oy) * (p[0] - ox)
            if cross >= 0:  # counter-clockwise or collinear: pop
                hull.pop()
            else:
                break
        hull.append(p)
    return hull


def _hull_eer(hull: list[tuple[int, int]], n_pos: int, n_neg: int) -> float:
    """Crossing of the hull with miss-rate == false-accept-rate."""
    rates = [(fa / n_neg, tp / n_pos) for fa, tp in hull]
    for (x1, y1), (x2, y2) in zip(rates, rates[1:]):
        g1 = 1.0 - x1 - y1
        g2 = 1.0 - x2 - y2
        if g1 >= 0.0 and g2 <= 0.0:
            denom = (x2 - x1) + (y2 - y1)
            if denom == 0.0:
                return x1
            t = g1 / denom
            return x1 + t * (x2 - x1)
    raise RuntimeError("ROC hull does not cross the equal-error diagonal")


def eer(scores, labels) -> float:
    """Equal-error rate from the ROC convex hull.

    Threshold sweep gives a staircase of operating points; the rate where
    false accepts equal false rejects is read off by linear interpolation
    between the two hull points straddling the crossing.
    """
    scores, labels, n_pos, n_neg = _validate(scores, labels)
    hull = _upper_hull(_roc_staircase(scores, labels))
    return _hull_eer(hull, n_pos, n_neg)


def auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative; ties 0.5."""
    scores, labels, n_pos, n_neg = _validate(scores, labels)
    order = np.argsort(scores, kind="mergesort")
    s_sorted = scores[order]
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _encode_audio_batched(model, feats_list: list[torch.Tensor],
                          chunk: int = 128) -> torch.Tensor:
    out = []
    for start in range(0, len(feats_list), chunk):
        group = feats_list[start:start + chunk]
        lengths = torch.tensor([f.shape[0] for f in group])
        padded = torch.zeros(len(group), int(lengths.max()), group[0].shape[1],
                             dtype=DTYPE)
        for i, f in enumerate(group):
            padded[i, :f.shape[0]] = f
        out.append(model.ccsp(model.acoustic(padded, lengths), lengths))
    return torch.cat(out, dim=0)


def _encode_text_batched(model, seqs: list[tuple[int, ...]],
                         chunk: int = 256) -> torch.Tensor:
    out = []
    for start in range(0, len(seqs), chunk):
        group = seqs[start:start + chunk]
        lengths = torch.tensor([len(s) for s in group])
        padded = torch.zeros(len(group), int(lengths.max()), dtype=torch.long)
        for i, s in enumerate(group):
            padded[i, :len(s)] = torch.tensor(s, dtype=torch.long)
        out.append(gap_pool_batch(model.text(padded, lengths), lengths))
    return torch.cat(out, dim=0)


def score_trials(model, corpus, trial_set: TrialSet) -> TrialSet:
    """Cosine-score every trial with the frozen encoders and pooling heads.

    Inference uses only the encoders and pooling: no cross attention, no
    classification head. Unique utterances and keywords are encoded once.
    """
    model.eval()
    utt_ids = sorted({t.utterance_id for t in trial_set.trials})
    kw_ids = sorted({t.keyword_id for t in trial_set.trials})
    with torch.no_grad():
        feats = [torch.as_tensor(corpus.features(u), dtype=DTYPE) for u in utt_ids]
        audio_vecs = _encode_audio_batched(model, feats)
        seqs = [corpus.phonemes(k) for k in kw_ids]
        text_vecs = _encode_text_batched(model, seqs)
        audio_norm = audio_vecs / torch.linalg.vector_norm(audio_vecs, dim=1,
                                                           keepdim=True)
        text_norm = text_vecs / torch.linalg.vector_norm(text_vecs, dim=1,
                                                         keepdim=True)
    audio_of = {u: audio_norm[i] for i, u in enumerate(utt_ids)}
    text_of = {k: text_norm[i] for i, k in enumerate(kw_ids)}
    scores = np.array(
        [float(text_of[t.keyword_id] @ audio_of[t.utterance_id])
         for t in trial_set.trials], dtype=np.float64)
    return TrialSet(trials=trial_set.trials, scores=scores,
                    with_replacement=trial_set.with_replacement)
