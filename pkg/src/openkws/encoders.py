"""Desk-scale acoustic and text encoders and the two pooling heads.

Contracts kept from the full-scale system they stand in for: neither
encoder subsamples (output length == input length), both project to a
shared d-dimensional space, the acoustic side pools with channel- and
context-dependent attentive statistics, the text side with a global
average. Widths and depths are config keys; defaults train on a CPU in
minutes.

Each encoder has a batched ``forward`` over padded sequences (used by the
trainer and scorer) and a single-sequence ``encode`` for direct use.
Padding positions are re-zeroed after every layer so they never leak into
valid frames.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .batching import DTYPE

STD_FLOOR = 1e-10


def fan_in_uniform_(tensor: torch.Tensor, fan_in: int, generator: torch.Generator) -> None:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) in-place init."""
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)


def length_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    """(N, max_len) boolean mask, True at valid positions."""
    ar = torch.arange(max_len, device=lengths.device)
    return ar[None, :] < lengths[:, None]


class AcousticEncoder(nn.Module):
    """Stack of same-length 1-D convolutions with residual connections.

    No subsampling: a (T, F) feature matrix maps to a (T, d) embedding
    sequence. The first layer changes channel count and carries no
    residual; later layers are residual.
    """

    def __init__(self, feat_dim: int = 40, channels: int = 64, num_layers: int = 3,
                 kernel: int = 3, out_dim: int = 256):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("kernel must be odd for same-length padding")
        self.feat_dim = feat_dim
        self.out_dim = out_dim
        convs = [nn.Conv1d(feat_dim, channels, kernel, padding=kernel // 2)]
        for _ in range(num_layers - 1):
            convs.append(nn.Conv1d(channels, channels, kernel, padding=kernel // 2))
        self.convs = nn.ModuleList(convs)
        self.proj = nn.Linear(channels, out_dim)
        self.to(DTYPE)

    def reset_parameters(self, generator: torch.Generator) -> None:
        for conv in self.convs:
            fan_in_uniform_(conv.weight, conv.in_channels * conv.kernel_size[0], generator)
            nn.init.zeros_(conv.bias)
        fan_in_uniform_(self.proj.weight, self.proj.in_features, generator)
        nn.init.zeros_(self.proj.bias)

    def forward(self, feats: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """(N, T_max, F) padded features -> (N, T_max, d), zero at padding."""
        if feats.shape[-1] != self.feat_dim:
            raise ValueError(f"expected feature dim {self.feat_dim}, got {feats.shape[-1]}")
        mask = length_mask(lengths, feats.shape[1]).to(feats.dtype)[:, None, :]
        x = feats.transpose(1, 2) * mask
        for i, conv in enumerate(self.convs):
            y = F.relu(conv(x)) * mask
            x = x + y if i > 0 else y
        out = self.proj(x.transpose(1, 2))
        return out * mask.transpose(1, 2)

    def encode(self, feats: torch.Tensor) -> torch.Tensor:
        """(T, F) -> (T, d)."""
        feats = torch.as_tensor(feats, dtype=DTYPE)
        if feats.ndim != 2:
            raise ValueError("expected a (T, F) matrix")
        lengths = torch.tensor([feats.shape[0]])
        return self.forward(feats[None], lengths)[0]


class TextEncoder(nn.Module):
    """Trainable phoneme lookup + one bidirectional recurrent layer.

    The recurrent output is projected back to the embedding width and
    added to the lookup, so every frame keeps a direct view of its own
    phoneme while the recurrence contributes context.
    """

    def __init__(self, vocab_size: int, emb_dim: int = 256, hidden: int = 64):
        super().__init__()
        self.vocab_size = vocab_size
        self.emb_dim = emb_dim
        self.table = nn.Embedding(vocab_size, emb_dim)
        self.rnn = nn.LSTM(emb_dim, hidden, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * hidden, emb_dim)
        self.to(DTYPE)

    def reset_parameters(self, generator: torch.Generator) -> None:
        fan_in_uniform_(self.table.weight, self.emb_dim, generator)
        for name, param in self.rnn.named_parameters():
            if "weight" in name:
                fan_in_uniform_(param, param.shape[1], generator)
            else:
                nn.init.zeros_(param)
        fan_in_uniform_(self.proj.weight, self.proj.in_features, generator)
        nn.init.zeros_(self.proj.bias)

    def _check_ids(self, ids: torch.Tensor) -> None:
        bad = ((ids < 0) | (ids >= self.vocab_size)).nonzero()
        if bad.numel():
            raise ValueError(
                f"phoneme id out of range at index {tuple(bad[0].tolist())}: "
                f"vocabulary size is {self.vocab_size}"
            )

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """(N, T_max) padded ids (pads may be any valid id) -> (N, T_max, d)."""
        mask = length_mask(lengths, ids.shape[1])
        self._check_ids(ids[mask])
        emb = self.table(ids)
        packed = pack_padded_sequence(emb, lengths.cpu(), batch_first=True,
                                      enforce_sorted=False)
        h, _ = self.rnn(packed)
        h, _ = pad_packed_sequence(h, batch_first=True, total_length=ids.shape[1])
        out = emb + self.proj(h)
        return out * mask.to(out.dtype)[:, :, None]

    def encode(self, ids) -> torch.Tensor:
        """Length-T id sequence -> (T, d)."""
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.ndim != 1 or ids.shape[0] < 1:
            raise ValueError("expected a nonempty 1-D id sequence")
        lengths = torch.tensor([ids.shape[0]])
        return self.forward(ids[None], lengths)[0]


class CcspPooling(nn.Module):
    """Channel- and context-dependent statistics pooling.

    Per-frame context (the frame itself, concatenated with the sequence
    mean and standard deviation) drives a small network that emits one
    attention logit per frame and channel. Softmax over time gives
    per-channel weights; the pooled vector is the projection of the
    attention-weighted mean and standard deviation.
    """

    def __init__(self, dim: int = 256, hidden: int = 64):
        super().__init__()
        self.dim = dim
        self.attn_in = nn.Linear(3 * dim, hidden)
        self.attn_out = nn.Linear(hidden, dim)
        self.proj = nn.Linear(2 * dim, dim)
        self.to(DTYPE)

    def reset_parameters(self, generator: torch.Generator) -> None:
        for lin in (self.attn_in, self.attn_out, self.proj):
            fan_in_uniform_(lin.weight, lin.in_features, generator)
            nn.init.zeros_(lin.bias)

    def attention_logits(self, seqs: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        mask = length_mask(lengths, seqs.shape[1]).to(seqs.dtype)[:, :, None]
        denom = lengths.to(seqs.dtype)[:, None]
        mean = (seqs * mask).sum(dim=1) / denom
        sq_mean = (seqs.pow(2) * mask).sum(dim=1) / denom
        std = torch.clamp(sq_mean - mean.pow(2), min=STD_FLOOR).sqrt()
        ctx = torch.cat(
            [seqs,
             mean[:, None, :].expand_as(seqs),
             std[:, None, :].expand_as(seqs)], dim=-1)
        return self.attn_out(torch.tanh(self.attn_in(ctx)))

    def forward(self, seqs: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """(N, T_max, d) padded sequences -> (N, d) pooled vectors."""
        if seqs.shape[1] == 0:
            raise ValueError("cannot pool an empty sequence")
        logits = self.attention_logits(seqs, lengths)
        pad = ~length_mask(lengths, seqs.shape[1])
        logits = logits.masked_fill(pad[:, :, None], float("-inf"))
        weights = torch.softmax(logits, dim=1)
        mu = (weights * seqs).sum(dim=1)
        sigma = torch.clamp((weights * seqs.pow(2)).sum(dim=1) - mu.pow(2),
                            min=STD_FLOOR).sqrt()
        return self.proj(torch.cat([mu, sigma], dim=-1))

    def pool(self, seq: torch.Tensor) -> torch.Tensor:
        """(T, d) -> (d,)."""
        seq = torch.as_tensor(seq, dtype=DTYPE)
        if seq.ndim != 2 or seq.shape[0] < 1:
            raise ValueError("expected a nonempty (T, d) sequence")
        return self.forward(seq[None], torch.tensor([seq.shape[0]]))[0]


def gap_pool(seq: torch.Tensor) -> torch.Tensor:
    """Global average over the time axis of a (T, d) sequence."""
    seq = torch.as_tensor(seq, dtype=DTYPE)
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise ValueError("expected a nonempty (T, d) sequence")
    return seq.mean(dim=0)


def gap_pool_batch(seqs: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Masked global average pooling over padded (N, T_max, d) sequences."""
    mask = length_mask(lengths, seqs.shape[1]).to(seqs.dtype)[:, :, None]
    return (seqs * mask).sum(dim=1) / lengths.to(seqs.dtype)[:, None]
