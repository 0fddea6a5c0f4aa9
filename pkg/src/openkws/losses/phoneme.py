"""Phoneme-level metric losses on flattened cross-modal embeddings.

All losses below consume a pair of positionally aligned flat embedding
matrices (text and audio rows describing the same phoneme positions) and
the shared phoneme labels. Positive sets pull text anchors toward audio
rows of the same phoneme class; negative sets push audio anchors away
from text rows of other classes. The same anchor convention is used by
every baseline so that comparisons isolate the aggregation function.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..batching import DTYPE, FlatEmbeddings, pairwise_cosine

PHONEME_LOSS_KINDS = ("asyp", "asyp_adams", "proxy_ms", "proxy_bd", "clat", "triplet")


def _softplus_inverse(y: float) -> float:
    return math.log(math.expm1(y))


class AsyPParams(nn.Module):
    """Pull scale, push scale, and boundary for the phoneme losses.

    In fixed mode one (alpha, beta, lambda) triple is shared by all
    phoneme classes. In learnable mode each class owns its own triple,
    updated by the trainer's optimizer; alpha and beta live behind a
    softplus so they stay positive, and lambda is clamped to [-1, 1]
    after every step.
    """

    def __init__(self, vocab_size: int, alpha: float = 0.01, beta: float = 1.5,
                 lam: float = 0.01, learnable: bool = False):
        super().__init__()
        if alpha <= 0 or beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if not -1.0 <= lam <= 1.0:
            raise ValueError("lambda must lie in [-1, 1]")
        self.vocab_size = vocab_size
        self.learnable = learnable
        raw_alpha = torch.full((vocab_size,), _softplus_inverse(alpha), dtype=DTYPE)
        raw_beta = torch.full((vocab_size,), _softplus_inverse(beta), dtype=DTYPE)
        lam_t = torch.full((vocab_size,), lam, dtype=DTYPE)
        if learnable:
            self.raw_alpha = nn.Parameter(raw_alpha)
            self.raw_beta = nn.Parameter(raw_beta)
            self.lam = nn.Parameter(lam_t)
        else:
            self.register_buffer("raw_alpha", raw_alpha)
            self.register_buffer("raw_beta", raw_beta)
            self.register_buffer("lam", lam_t)

    def alpha_of(self, labels: torch.Tensor) -> torch.Tensor:
        return F.softplus(self.raw_alpha)[labels]

    def beta_of(self, labels: torch.Tensor) -> torch.Tensor:
        return F.softplus(self.raw_beta)[labels]

    def lam_of(self, labels: torch.Tensor) -> torch.Tensor:
        return self.lam[labels]

    @torch.no_grad()
    def clamp_lambda_(self) -> None:
        self.lam.clamp_(-1.0, 1.0)


def else_term(sims, alpha: float, lam: float) -> torch.Tensor:
    """Extended-log-sum-exp pull term: (1/a) * ln(1 + sum_j e^{a(lam - s_j)}).

    Softly focuses on the worst (lowest-similarity) positives; an empty
    similarity list contributes zero.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    sims = torch.as_tensor(sims, dtype=DTYPE)
    if sims.numel() == 0:
        return torch.zeros((), dtype=DTYPE)
    return torch.log1p(torch.exp(alpha * (lam - sims)).sum()) / alpha


def msp_term(sims, beta: float, lam: float) -> torch.Tensor:
    """Mean-softplus push term: mean_k softplus(b * (s_k - lam)).

    A smooth hinge on each negative similarity above the boundary; an
    empty list contributes zero.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    sims = torch.as_tensor(sims, dtype=DTYPE)
    if sims.numel() == 0:
        return torch.zeros((), dtype=DTYPE)
    return F.softplus(beta * (sims - lam)).mean()


def _similarity_views(flat_audio: FlatEmbeddings, flat_text: FlatEmbeddings):
    if len(flat_audio) != len(flat_text):
        raise ValueError("audio and text flats must have equal row counts")
    if not torch.equal(flat_audio.labels, flat_text.labels):
        raise ValueError("audio and text flats must carry identical labels")
    labels = flat_audio.labels
    # s_ta[i, j] = cos(text_i, audio_j); its transpose is cos(audio_i, text_k)
    s_ta = pairwise_cosine(flat_text.matrix, flat_audio.matrix)
    same = labels[:, None] == labels[None, :]
    return s_ta, same, labels


def asyp_phoneme_loss(flat_audio: FlatEmbeddings, flat_text: FlatEmbeddings,
                      params: AsyPParams) -> torch.Tensor:
    """Asymmetric pull/push phoneme loss.

    Per anchor position i, an extended-log-sum-exp term draws the text
    row toward same-phoneme audio rows and a mean-softplus term pushes
    the audio row away from other-phoneme text rows; (alpha, beta,
    lambda) are selected by the anchor's phoneme class.
    """
    s_ta, same, labels = _similarity_views(flat_audio, flat_text)
    alpha = params.alpha_of(labels)
    beta = params.beta_of(labels)
    lam = params.lam_of(labels)
    pos = same.to(DTYPE)
    neg = (~same).to(DTYPE)

    pulls = torch.log1p(
        (torch.exp(alpha[:, None] * (lam[:, None] - s_ta)) * pos).sum(dim=1)
    ) / alpha
    push_terms = F.softplus(beta[:, None] * (s_ta.T - lam[:, None])) * neg
    pushes = push_terms.sum(dim=1) / neg.sum(dim=1).clamp(min=1.0)
    return (pulls + pushes).mean()


def proxy_ms_phoneme_loss(flat_audio, flat_text, params: AsyPParams) -> torch.Tensor:
    """Extended-log-sum-exp on both the positive and negative sides."""
    s_ta, same, labels = _similarity_views(flat_audio, flat_text)
    alpha = params.alpha_of(labels)
    beta = params.beta_of(labels)
    lam = params.lam_of(labels)
    pos = same.to(DTYPE)
    neg = (~same).to(DTYPE)
    pulls = torch.log1p(
        (torch.exp(alpha[:, None] * (lam[:, None] - s_ta)) * pos).sum(dim=1)
    ) / alpha
    pushes = torch.log1p(
        (torch.exp(beta[:, None] * (s_ta.T - lam[:, None])) * neg).sum(dim=1)
    ) / beta
    return (pulls + pushes).mean()


def proxy_bd_phoneme_loss(flat_audio, flat_text, params: AsyPParams) -> torch.Tensor:
    """Mean-softplus (binomial-deviance style) on both sides."""
    s_ta, same, labels = _similarity_views(flat_audio, flat_text)
    alpha = params.alpha_of(labels)
    beta = params.beta_of(labels)
    lam = params.lam_of(labels)
    pos = same.to(DTYPE)
    neg = (~same).to(DTYPE)
    pull_terms = F.softplus(alpha[:, None] * (lam[:, None] - s_ta)) * pos
    pulls = pull_terms.sum(dim=1) / pos.sum(dim=1).clamp(min=1.0)
    push_terms = F.softplus(beta[:, None] * (s_ta.T - lam[:, None])) * neg
    pushes = push_terms.sum(dim=1) / neg.sum(dim=1).clamp(min=1.0)
    return (pulls + pushes).mean()


def clat_phoneme_loss(flat_audio, flat_text, temperature: float = 0.07) -> torch.Tensor:
    """Temperature-scaled contrastive (InfoNCE) loss over text anchors.

    Each positive (text_i, audio_j) pair is scored against all audio rows;
    the mean negative log-likelihood over positive pairs is returned.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    s_ta, same, _ = _similarity_views(flat_audio, flat_text)
    logp = torch.log_softmax(s_ta / temperature, dim=1)
    pos = same.to(DTYPE)
    return -(logp * pos).sum() / pos.sum()


def triplet_phoneme_loss(flat_audio, flat_text, margin: float = 0.2) -> torch.Tensor:
    """Hinge over all (text anchor, positive audio, negative audio) triplets."""
    s_ta, same, _ = _similarity_views(flat_audio, flat_text)
    # viol[i, j, k] = margin + s(i, k) - s(i, j) for positive j, negative k
    viol = F.relu(margin + s_ta[:, None, :] - s_ta[:, :, None])
    mask = (same[:, :, None] & ~same[:, None, :]).to(DTYPE)
    count = mask.sum()
    if count == 0:
        return s_ta.new_zeros(())
    return (viol * mask).sum() / count


def baseline_phoneme_loss(kind: str, flat_audio, flat_text, params: AsyPParams,
                          temperature: float = 0.07, margin: float = 0.2) -> torch.Tensor:
    """Dispatch for the comparison set of phoneme-level losses."""
    if kind == "proxy_ms":
        return proxy_ms_phoneme_loss(flat_audio, flat_text, params)
    if kind == "proxy_bd":
        return proxy_bd_phoneme_loss(flat_audio, flat_text, params)
    if kind == "clat":
        return clat_phoneme_loss(flat_audio, flat_text, temperature)
    if kind == "triplet":
        return triplet_phoneme_loss(flat_audio, flat_text, margin)
    raise ValueError(f"unknown baseline phoneme loss kind: {kind!r}")
