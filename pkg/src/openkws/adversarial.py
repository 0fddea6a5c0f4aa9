"""Modality adversarial machinery.

A small classifier tries to tell audio embeddings from text embeddings;
a gradient reversal layer between the encoders and the classifier flips
the classifier's training signal on its way back into the encoders, so a
single minimization step trains the classifier to discriminate while
training the encoders to confuse it.

Convention: modality label 0 = audio, 1 = text.
"""

from __future__ import annotations

import warnings

import torch
import torch.nn as nn
import torch.nn.functional as F

from .batching import DTYPE, FlatEmbeddings
from .encoders import fan_in_uniform_

AUDIO_LABEL = 0
TEXT_LABEL = 1


class _GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.scale, None


def grl(x: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    """Identity forward; gradient multiplied by -scale on the way back."""
    return _GradientReversal.apply(x, scale)


class ModalityClassifier(nn.Module):
    """Two fully connected layers predicting audio-vs-text from an embedding."""

    def __init__(self, dim: int = 256, hidden: int = 256):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, 2)
        self.to(DTYPE)

    def reset_parameters(self, generator: torch.Generator) -> None:
        for lin in (self.fc1, self.fc2):
            fan_in_uniform_(lin.weight, lin.in_features, generator)
            nn.init.zeros_(lin.bias)

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(emb)))

    def predict_proba(self, emb: torch.Tensor) -> torch.Tensor:
        """Softmax modality probabilities; rows sum to 1."""
        return torch.softmax(self.forward(emb), dim=-1)


def classify_modality(clf: ModalityClassifier, emb: torch.Tensor) -> torch.Tensor:
    """Length-2 probability vector (audio, text) for one embedding."""
    emb = torch.as_tensor(emb, dtype=DTYPE)
    return clf.predict_proba(emb)


def _as_matrix(embs) -> torch.Tensor:
    if isinstance(embs, FlatEmbeddings):
        return embs.matrix
    return torch.as_tensor(embs, dtype=DTYPE)


def _modality_nll(clf: ModalityClassifier, audio: torch.Tensor,
                  text: torch.Tensor) -> torch.Tensor:
    """Sum over both modalities of true-label negative log-probabilities.

    The caller divides by the per-modality count N, not 2N: the stated
    normalization double-counts modalities relative to a mean, and the
    2*ln(2) uniform-prediction anchor depends on it.
    """
    logp_a = torch.log_softmax(clf(audio), dim=-1)[:, AUDIO_LABEL]
    logp_t = torch.log_softmax(clf(text), dim=-1)[:, TEXT_LABEL]
    return -(logp_a.sum() + logp_t.sum())


def adv_loss_phn(clf: ModalityClassifier, flat_audio, flat_text) -> torch.Tensor:
    """Phoneme-level modality cross-entropy over 2*N* rows, divided by N*."""
    audio = _as_matrix(flat_audio)
    text = _as_matrix(flat_text)
    if audio.shape[0] != text.shape[0]:
        raise ValueError("audio and text flats must share the row count")
    if audio.shape[0] == 0:
        raise ValueError("empty flattened batch")
    return _modality_nll(clf, audio, text) / audio.shape[0]


def adv_loss_utt(clf: ModalityClassifier, utt_audio: torch.Tensor,
                 utt_text: torch.Tensor) -> torch.Tensor:
    """Utterance-level modality cross-entropy over 2*N rows, divided by N."""
    utt_audio = _as_matrix(utt_audio)
    utt_text = _as_matrix(utt_text)
    if utt_audio.shape[0] != utt_text.shape[0]:
        raise ValueError("audio and text utterance batches must share N")
    if utt_audio.shape[0] == 0:
        raise ValueError("empty utterance batch")
    return _modality_nll(clf, utt_audio, utt_text) / utt_audio.shape[0]


def total_adv_loss(clf: ModalityClassifier, flat_audio=None, flat_text=None,
                   utt_audio=None, utt_text=None, enabled_phn: bool = True,
                   enabled_utt: bool = True) -> torch.Tensor:
    """Sum of the enabled adversarial levels; each level ablatable."""
    if not enabled_phn and not enabled_utt:
        warnings.warn("both adversarial levels disabled; loss is 0", stacklevel=2)
        return torch.zeros((), dtype=DTYPE)
    total = torch.zeros((), dtype=DTYPE)
    if enabled_phn:
        total = total + adv_loss_phn(clf, flat_audio, flat_text)
    if enabled_utt:
        total = total + adv_loss_utt(clf, utt_audio, utt_text)
    return total


def modality_accuracy(clf: ModalityClassifier, audio: torch.Tensor,
                      text: torch.Tensor) -> float:
    """Argmax accuracy of the classifier over a balanced embedding set."""
    with torch.no_grad():
        pred_a = clf(_as_matrix(audio)).argmax(dim=-1)
        pred_t = clf(_as_matrix(text)).argmax(dim=-1)
        correct = (pred_a == AUDIO_LABEL).sum() + (pred_t == TEXT_LABEL).sum()
    return float(correct) / (pred_a.shape[0] + pred_t.shape[0])


def fit_modality_probe(audio: torch.Tensor, text: torch.Tensor, seed: int,
                       hidden: int = 256, steps: int = 300, lr: float = 1e-3,
                       train_frac: float = 0.5) -> float:
    """Train a fresh modality classifier on frozen embeddings.

    Splits each modality into probe-train and probe-test halves, fits the
    probe full-batch, and returns held-out accuracy. Near-chance accuracy
    means the embedding spaces are modality-invariant.
    """
    audio = _as_matrix(audio).detach()
    text = _as_matrix(text).detach()
    gen = torch.Generator().manual_seed(seed)
    probe = ModalityClassifier(dim=audio.shape[1], hidden=hidden)
    probe.reset_parameters(gen)

    def split(mat: torch.Tensor):
        perm = torch.randperm(mat.shape[0], generator=gen)
        cut = max(1, int(mat.shape[0] * train_frac))
        return mat[perm[:cut]], mat[perm[cut:]]

    a_tr, a_te = split(audio)
    t_tr, t_te = split(text)
    opt = torch.optim.AdamW(probe.parameters(), lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        loss = _modality_nll(probe, a_tr, t_tr) / (a_tr.shape[0] + t_tr.shape[0])
        loss.backward()
        opt.step()
    return modality_accuracy(probe, a_te, t_te)
