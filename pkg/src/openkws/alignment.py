"""Cross-attention alignment of audio to text length and its matching loss.

The text sequence queries the audio sequence; keys and values are the raw
audio embeddings with no extra projections. The affinity matrix of a
matching pair is regressed toward a monotonic diagonal band.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

ROW_SUM_TOL = 1e-4
DEFAULT_BAND_WIDTH = 0.1


@dataclass
class AffinityResult:
    """Row-stochastic (T_t, T_a) affinity and the (T_t, d) aggregated audio."""

    affinity: torch.Tensor
    aggregated: torch.Tensor


def cross_attend(e_t: torch.Tensor, e_a: torch.Tensor) -> AffinityResult:
    """Align audio embeddings to text length with scaled dot-product attention.

    e_t (T_t, d) is the query; e_a (T_a, d) is both key and value. Each
    text position gets a softmax-weighted mixture of audio frames.
    """
    if e_t.ndim != 2 or e_a.ndim != 2 or e_t.shape[1] != e_a.shape[1]:
        raise ValueError("expected (T_t, d) and (T_a, d) with matching d")
    logits = (e_t @ e_a.T) / math.sqrt(e_t.shape[1])
    affinity = torch.softmax(logits, dim=1)
    return AffinityResult(affinity=affinity, aggregated=affinity @ e_a)


def band_target(t_t: int, t_a: int, width: float = DEFAULT_BAND_WIDTH,
                dtype=torch.float64) -> torch.Tensor:
    """Row-normalized Gaussian band along the monotonic diagonal.

    Row i is centered at i*(T_a-1)/max(T_t-1, 1) with standard deviation
    width*T_a; as width -> 0 it approaches a strict diagonal.
    """
    rows = torch.arange(t_t, dtype=dtype)
    cols = torch.arange(t_a, dtype=dtype)
    centers = rows * (t_a - 1) / max(t_t - 1, 1)
    sigma = width * t_a
    logits = -((cols[None, :] - centers[:, None]) ** 2) / (2.0 * sigma * sigma)
    return torch.softmax(logits, dim=1)


def monotonic_matching_loss(affinity: torch.Tensor, is_match: bool,
                            band_width: float = DEFAULT_BAND_WIDTH) -> torch.Tensor:
    """MSE between an affinity matrix and the diagonal band target.

    Non-matching pairs carry no target and contribute exactly zero. The
    affinity must be row-stochastic; a row sum off by more than 1e-4 is a
    contract violation, not data.
    """
    if affinity.ndim != 2:
        raise ValueError("expected a (T_t, T_a) affinity matrix")
    if not is_match:
        return affinity.new_zeros(())
    row_sums = affinity.detach().sum(dim=1)
    worst = (row_sums - 1.0).abs().max()
    if worst > ROW_SUM_TOL:
        raise ValueError(f"affinity is not row-stochastic (max row-sum error {worst:.3g})")
    target = band_target(affinity.shape[0], affinity.shape[1], band_width,
                         dtype=affinity.dtype)
    return ((affinity - target) ** 2).mean()
