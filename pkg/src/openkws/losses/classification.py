"""Keyword classification heads for the acoustic utterance embedding.

Auxiliary objectives that sharpen intra-modal discrimination: a
multiclass additive-angular-margin softmax and a pairwise binary-margin
head (SphereFace2 style, one binary classifier per class). Both operate
on cosine similarities, so they are invariant to embedding scale. A
head-free triplet variant is also provided.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..batching import DTYPE, pairwise_cosine
from ..encoders import fan_in_uniform_

CLASSIFIER_KINDS = ("none", "triplet", "aam", "sphereface2")

SIN_FLOOR = 1e-12


def _normalized_cosines(head_weight: torch.Tensor, emb: torch.Tensor,
                        labels: torch.Tensor) -> torch.Tensor:
    n_classes = head_weight.shape[0]
    labels = torch.as_tensor(labels, dtype=torch.long)
    bad = ((labels < 0) | (labels >= n_classes)).nonzero()
    if bad.numel():
        raise ValueError(f"label out of range at sample {int(bad[0])}: "
                         f"head has {n_classes} classes")
    return pairwise_cosine(emb, head_weight)


class AamSoftmaxHead(nn.Module):
    """Additive angular margin softmax over normalized class weights."""

    def __init__(self, num_classes: int, dim: int, scale: float = 30.0,
                 margin: float = 0.2):
        super().__init__()
        if scale <= 0 or margin < 0:
            raise ValueError("scale must be positive and margin nonnegative")
        self.scale = scale
        self.margin = margin
        self.weight = nn.Parameter(torch.empty(num_classes, dim, dtype=DTYPE))

    def reset_parameters(self, generator: torch.Generator) -> None:
        fan_in_uniform_(self.weight, self.weight.shape[1], generator)

    def loss(self, emb: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        cos = _normalized_cosines(self.weight, emb, labels)
        sin = torch.sqrt(torch.clamp(1.0 - cos * cos, min=SIN_FLOOR))
        phi = cos * math.cos(self.margin) - sin * math.sin(self.margin)
        one_hot = F.one_hot(torch.as_tensor(labels, dtype=torch.long),
                            cos.shape[1]).to(cos.dtype)
        logits = self.scale * (one_hot * phi + (1.0 - one_hot) * cos)
        return F.cross_entropy(logits, torch.as_tensor(labels, dtype=torch.long))

    forward = loss


class SphereFace2Head(nn.Module):
    """One binary margin classifier per keyword class.

    Cosines pass through the similarity rescaling
    g(z) = 2 * ((z + 1) / 2)^t - 1 before margins; the target class pays
    softplus(-(s * (g - m) + b)) and each non-target class pays a
    t-weighted softplus(s * (g + m) + b) averaged over the C - 1
    non-targets.
    """

    def __init__(self, num_classes: int, dim: int, scale: float = 30.0,
                 margin: float = 0.2, t_balance: float = 3.0, r_weight: float = 1.0):
        super().__init__()
        if scale <= 0 or margin < 0:
            raise ValueError("scale must be positive and margin nonnegative")
        self.scale = scale
        self.margin = margin
        self.t_balance = t_balance
        self.r_weight = r_weight
        self.weight = nn.Parameter(torch.empty(num_classes, dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(num_classes, dtype=DTYPE))

    def reset_parameters(self, generator: torch.Generator) -> None:
        fan_in_uniform_(self.weight, self.weight.shape[1], generator)
        nn.init.zeros_(self.bias)

    def loss(self, emb: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        labels = torch.as_tensor(labels, dtype=torch.long)
        cos = _normalized_cosines(self.weight, emb, labels)
        g = 2.0 * ((cos + 1.0) / 2.0) ** self.t_balance - 1.0
        n_classes = cos.shape[1]
        one_hot = F.one_hot(labels, n_classes).to(cos.dtype)
        target_terms = F.softplus(-(self.scale * (g - self.margin) + self.bias))
        per_sample = (one_hot * target_terms).sum(dim=1) / self.r_weight
        if n_classes > 1:
            other_terms = F.softplus(self.scale * (g + self.margin) + self.bias)
            per_sample = per_sample + ((1.0 - one_hot) * other_terms).sum(dim=1) * (
                self.t_balance / (self.r_weight * (n_classes - 1)))
        return per_sample.mean()

    forward = loss


def keyword_triplet_loss(emb: torch.Tensor, labels: torch.Tensor,
                         margin: float = 0.2) -> torch.Tensor:
    """Head-free intra-modal triplet hinge on utterance embeddings."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    sims = pairwise_cosine(emb, emb)
    same = labels[:, None] == labels[None, :]
    pos_mask = same.clone()
    pos_mask.fill_diagonal_(False)
    viol = F.relu(margin + sims[:, None, :] - sims[:, :, None])
    mask = (pos_mask[:, :, None] & ~same[:, None, :]).to(DTYPE)
    count = mask.sum()
    if count == 0:
        return sims.new_zeros(())
    return (viol * mask).sum() / count
