"""Utterance-level relational losses.

One-way structural distillation from text embeddings (teacher, gradient
blocked) to acoustic embeddings (student), in the relational
knowledge-distillation style: pairwise distances, triplet-wise angles,
and a prototypical classification view.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from ..batching import DTYPE, pairwise_cosine


@dataclass
class RpLossWeights:
    """Nonnegative mixing weights for the three relational variants."""

    w_dist: float = 1.0
    w_angle: float = 1.0
    w_proto: float = 1.0

    def __post_init__(self):
        if min(self.w_dist, self.w_angle, self.w_proto) < 0:
            raise ValueError("relational loss weights must be nonnegative")


def _pair_distances(embs: torch.Tensor) -> torch.Tensor:
    """Mean-normalized distances of all unordered row pairs, as a vector."""
    n = embs.shape[0]
    ii, jj = torch.triu_indices(n, n, offset=1)
    dists = torch.linalg.vector_norm(embs[ii] - embs[jj], dim=1)
    mean = dists.mean()
    if mean == 0:  # fully collapsed set; structure is trivially flat
        return dists
    return dists / mean


def rp_distance_loss(ae: torch.Tensor, te: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    """Huber mismatch between normalized pairwise-distance structures."""
    if ae.shape[0] < 2:
        raise ValueError("distance-wise relational loss needs at least 2 rows")
    return F.huber_loss(_pair_distances(ae), _pair_distances(te).detach(), delta=delta)


def _triplet_angles(embs: torch.Tensor) -> torch.Tensor:
    """cos of the angle at each anchor over all ordered distinct triplets."""
    n = embs.shape[0]
    diffs = F.normalize(embs[None, :, :] - embs[:, None, :], dim=2)
    cosines = torch.einsum("aud,avd->auv", diffs, diffs)
    idx = torch.arange(n)
    valid = torch.ones(n, n, n, dtype=torch.bool)
    valid[idx, idx, :] = False
    valid[idx, :, idx] = False
    valid[:, idx, idx] = False
    return cosines[valid]


def rp_angle_loss(ae: torch.Tensor, te: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    """Huber mismatch between the anchor-angle structures of AEs and TEs."""
    if ae.shape[0] < 3:
        raise ValueError("angle-wise relational loss needs at least 3 rows")
    return F.huber_loss(_triplet_angles(ae), _triplet_angles(te).detach(), delta=delta)


def rp_proto_loss(ae: torch.Tensor, te: torch.Tensor, keyword_ids: torch.Tensor,
                  temperature: float = 0.1) -> torch.Tensor:
    """Cross-entropy of each AE against per-keyword TE prototypes.

    Prototypes are the means of TEs sharing a keyword id, gradient
    blocked; logits are cosine similarities over the temperature.
    """
    if ae.shape[0] == 0:
        raise ValueError("empty batch")
    keyword_ids = torch.as_tensor(keyword_ids, dtype=torch.long)
    classes, targets = torch.unique(keyword_ids, return_inverse=True)
    protos = torch.stack([te[keyword_ids == c].mean(dim=0) for c in classes]).detach()
    logits = pairwise_cosine(ae, protos) / temperature
    return F.cross_entropy(logits, targets)


def utterance_rp_loss(ae: torch.Tensor, te: torch.Tensor, keyword_ids,
                      weights: RpLossWeights | None = None, delta: float = 1.0,
                      temperature: float = 0.1) -> torch.Tensor:
    """Weighted sum of the three relational variants; zero weights skip."""
    weights = weights or RpLossWeights()
    total = torch.zeros((), dtype=DTYPE)
    if weights.w_dist:
        total = total + weights.w_dist * rp_distance_loss(ae, te, delta)
    if weights.w_angle:
        total = total + weights.w_angle * rp_angle_loss(ae, te, delta)
    if weights.w_proto:
        total = total + weights.w_proto * rp_proto_loss(ae, te, keyword_ids, temperature)
    return total
