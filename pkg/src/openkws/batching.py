"""Batch containers and elementary similarity operations.

Everything downstream (alignment, metric losses, adversarial losses,
scoring) works on the structures defined here: ragged per-utterance
sequences, their flattened phoneme-level view, and cosine similarity.
All reference-path math is double precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

DTYPE = torch.float64


@dataclass
class PhonemeBatch:
    """A mini-batch of (audio feature sequence, phoneme ids, keyword id) triples.

    ``audio_features[i]`` is a (T_a, F) float tensor, ``phoneme_ids[i]`` a
    length-T_t long tensor, ``keyword_ids[i]`` the word class. Sequences are
    ragged; the data generator guarantees T_a >= T_t >= 1 for every item.
    """

    audio_features: list[torch.Tensor]
    phoneme_ids: list[torch.Tensor]
    keyword_ids: torch.Tensor

    def __post_init__(self):
        if not (len(self.audio_features) == len(self.phoneme_ids) == len(self.keyword_ids)):
            raise ValueError("batch fields must have equal length")
        for i, (feats, ids) in enumerate(zip(self.audio_features, self.phoneme_ids)):
            if len(ids) < 1:
                raise ValueError(f"item {i}: empty phoneme sequence")
            if feats.shape[0] < len(ids):
                raise ValueError(
                    f"item {i}: audio length {feats.shape[0]} shorter than "
                    f"phoneme length {len(ids)}"
                )

    def __len__(self) -> int:
        return len(self.audio_features)


@dataclass
class RaggedEmbeddings:
    """N variable-length sequences of d-dimensional embeddings."""

    values: list[torch.Tensor]

    @property
    def lengths(self) -> list[int]:
        return [v.shape[0] for v in self.values]

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class FlatEmbeddings:
    """Ragged embeddings flattened to one (N*, d) matrix with per-row labels.

    Row j of the audio flat matrix and row j of the text flat matrix built
    from the same batch describe the same phoneme position, and labels[j]
    is that position's phoneme class.
    """

    matrix: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if self.matrix.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"matrix has {self.matrix.shape[0]} rows but {self.labels.shape[0]} labels"
            )

    def __len__(self) -> int:
        return self.matrix.shape[0]


def ragged_flatten(embs: RaggedEmbeddings, labels: list[torch.Tensor]) -> FlatEmbeddings:
    """Flatten ragged embeddings batch-major into an (N*, d) matrix.

    Row order is utterance 0's positions, then utterance 1's, and so on;
    labels are carried along row-for-row. N* = sum of sequence lengths.
    """
    if len(embs.values) != len(labels):
        raise ValueError(
            f"{len(embs.values)} embedding sequences but {len(labels)} label sequences"
        )
    for i, (v, l) in enumerate(zip(embs.values, labels)):
        if v.shape[0] != len(l):
            raise ValueError(
                f"item {i}: {v.shape[0]} embedding rows but {len(l)} labels"
            )
    matrix = torch.cat(list(embs.values), dim=0)
    flat_labels = torch.cat([torch.as_tensor(l, dtype=torch.long) for l in labels])
    return FlatEmbeddings(matrix=matrix, labels=flat_labels)


def _check_nonzero_rows(mat: torch.Tensor, name: str) -> torch.Tensor:
    norms = torch.linalg.vector_norm(mat, dim=-1)
    zero = (norms == 0).nonzero()
    if zero.numel():
        raise ValueError(f"zero-norm row {int(zero[0])} in {name}")
    return norms


def cosine_sim(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of two vectors; zero-norm inputs are an error.

    Collapse to a zero vector is something the caller must see, so no
    epsilon smoothing is applied.
    """
    u = torch.as_tensor(u, dtype=DTYPE)
    v = torch.as_tensor(v, dtype=DTYPE)
    nu = torch.linalg.vector_norm(u)
    nv = torch.linalg.vector_norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity of a zero-norm vector is undefined")
    return (u * v).sum() / (nu * nv)


def pairwise_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """All-pairs cosine similarity between rows of a (m, d) and b (n, d)."""
    a = torch.as_tensor(a, dtype=DTYPE)
    b = torch.as_tensor(b, dtype=DTYPE)
    na = _check_nonzero_rows(a, "A")
    nb = _check_nonzero_rows(b, "B")
    return (a / na[:, None]) @ (b / nb[:, None]).T
