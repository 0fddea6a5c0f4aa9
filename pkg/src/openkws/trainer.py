"""Training step, episodic batch sampler, and learning-rate schedule.

One optimizer minimizes the embedding objective plus the weighted
adversarial loss; the gradient reversal layer in front of the modality
classifier flips the adversarial gradient for the embedding parameters,
so the single minimization realizes both sides of the minimax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .adversarial import adv_loss_phn, adv_loss_utt, grl, modality_accuracy, ModalityClassifier
from .alignment import cross_attend, monotonic_matching_loss
from .batching import DTYPE, FlatEmbeddings, PhonemeBatch
from .config import LossConfig, ModelConfig, TrainConfig
from .encoders import AcousticEncoder, CcspPooling, TextEncoder, gap_pool_batch
from .losses import (
    AamSoftmaxHead,
    AsyPParams,
    RpLossWeights,
    SphereFace2Head,
    asyp_phoneme_loss,
    baseline_phoneme_loss,
    keyword_triplet_loss,
    utterance_rp_loss,
)


class NumericsError(RuntimeError):
    """A loss term became non-finite; training aborted."""


class KwsModel(torch.nn.Module):
    """Both encoders, pooling, loss parameters, and the modality classifier.

    Trainable parameters split into exactly two groups: the modality
    classifier, and everything else (the embedding side).
    """

    def __init__(self, model_cfg: ModelConfig, loss_cfg: LossConfig,
                 vocab_size: int, feat_dim: int, num_classes: int):
        super().__init__()
        d = model_cfg.embed_dim
        self.acoustic = AcousticEncoder(
            feat_dim=feat_dim, channels=model_cfg.acoustic_channels,
            num_layers=model_cfg.acoustic_layers,
            kernel=model_cfg.acoustic_kernel, out_dim=d)
        self.text = TextEncoder(vocab_size, emb_dim=d,
                                hidden=model_cfg.text_hidden)
        self.ccsp = CcspPooling(dim=d, hidden=model_cfg.ccsp_hidden)
        self.asyp = AsyPParams(vocab_size, alpha=loss_cfg.alpha_init,
                               beta=loss_cfg.beta_init, lam=loss_cfg.lambda_init,
                               learnable=(loss_cfg.phoneme == "asyp_adams"))
        if loss_cfg.classifier == "aam":
            self.head = AamSoftmaxHead(num_classes, d, scale=loss_cfg.aam_scale,
                                       margin=loss_cfg.aam_margin)
        elif loss_cfg.classifier == "sphereface2":
            self.head = SphereFace2Head(num_classes, d, scale=loss_cfg.sf2_scale,
                                        margin=loss_cfg.sf2_margin,
                                        t_balance=loss_cfg.sf2_t_balance)
        else:
            self.head = None
        self.modality = ModalityClassifier(dim=d, hidden=model_cfg.modality_hidden)
        self.to(DTYPE)

    def reset_parameters(self, generator: torch.Generator) -> None:
        self.acoustic.reset_parameters(generator)
        self.text.reset_parameters(generator)
        self.ccsp.reset_parameters(generator)
        if self.head is not None:
            self.head.reset_parameters(generator)
        self.modality.reset_parameters(generator)

    def embedding_parameters(self) -> list[torch.nn.Parameter]:
        mod_ids = {id(p) for p in self.modality.parameters()}
        return [p for p in self.parameters() if id(p) not in mod_ids]

    def modality_parameters(self) -> list[torch.nn.Parameter]:
        return list(self.modality.parameters())

    def assert_parameter_partition(self) -> None:
        """Every trainable parameter sits in exactly one optimizer group."""
        all_ids = [id(p) for p in self.parameters()]
        emb = {id(p) for p in self.embedding_parameters()}
        mod = {id(p) for p in self.modality_parameters()}
        if emb & mod:
            raise AssertionError("embedding and modality parameter groups overlap")
        if set(all_ids) != emb | mod:
            raise AssertionError("some parameters belong to neither group")


@dataclass
class StepMetrics:
    epoch: int
    step: int
    l_utt: float
    l_key: float
    l_mm: float
    l_phn: float
    l_adv_phn: float
    l_adv_utt: float
    total: float
    grad_norm_emb: float
    grad_norm_mod: float
    modality_acc: float
    lr: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainState:
    model: KwsModel
    optimizer: torch.optim.Optimizer
    class_lookup: torch.Tensor  # keyword id -> train class index (-1 if unseen)
    epoch: int = 0
    step: int = 0


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Base rate halved every lr_halving_period epochs."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return cfg.base_lr * 0.5 ** (epoch // cfg.lr_halving_period)


def embedding_loss(l_utt, l_key, l_mm, l_phn, lambda_phn: float):
    """Total embedding objective: utterance + keyword + alignment + scaled phoneme."""
    return l_utt + l_key + l_mm + lambda_phn * l_phn


class BatchSampler:
    """Episodic P x K sampler: P keywords per batch, K utterances each.

    Keywords are drawn without replacement within an epoch (a trailing
    group smaller than P is dropped); each keyword contributes K distinct
    utterances.
    """

    def __init__(self, corpus, keywords_per_batch: int, utterances_per_keyword: int,
                 rng: np.random.Generator, split: str = "train"):
        self.corpus = corpus
        self.p = keywords_per_batch
        self.k = utterances_per_keyword
        self.rng = rng
        self.keywords = corpus.keywords(split)
        if len(self.keywords) < self.p:
            raise ValueError(
                f"corpus has {len(self.keywords)} {split} keywords; "
                f"need at least P={self.p}")
        for kw in self.keywords:
            n = len(corpus.utterance_ids(kw))
            if n < self.k:
                raise ValueError(
                    f"keyword {kw} has {n} utterances; need at least K={self.k}")

    def batches_per_epoch(self) -> int:
        return len(self.keywords) // self.p

    def epoch(self):
        order = self.rng.permutation(len(self.keywords))
        for start in range(0, self.batches_per_epoch() * self.p, self.p):
            chosen = [self.keywords[i] for i in order[start:start + self.p]]
            feats, ids, kws = [], [], []
            for kw in chosen:
                utts = self.corpus.utterance_ids(kw)
                picks = self.rng.choice(len(utts), size=self.k, replace=False)
                for pick in picks:
                    feats.append(torch.as_tensor(
                        self.corpus.features(utts[int(pick)]), dtype=DTYPE))
                    ids.append(torch.tensor(self.corpus.phonemes(kw),
                                            dtype=torch.long))
                    kws.append(kw)
            yield PhonemeBatch(audio_features=feats, phoneme_ids=ids,
                               keyword_ids=torch.tensor(kws, dtype=torch.long))


def sample_batch(corpus, keywords_per_batch: int, utterances_per_keyword: int,
                 rng: np.random.Generator, split: str = "train") -> PhonemeBatch:
    """First batch of a fresh epoch; validates the P x K preconditions."""
    sampler = BatchSampler(corpus, keywords_per_batch, utterances_per_keyword,
                           rng, split)
    return next(sampler.epoch())


def pad_batch(batch: PhonemeBatch):
    """Ragged batch -> padded tensors plus length vectors."""
    n = len(batch)
    a_len = torch.tensor([f.shape[0] for f in batch.audio_features])
    t_len = torch.tensor([len(p) for p in batch.phoneme_ids])
    feats = torch.zeros(n, int(a_len.max()), batch.audio_features[0].shape[1],
                        dtype=DTYPE)
    ids = torch.zeros(n, int(t_len.max()), dtype=torch.long)
    for i in range(n):
        feats[i, :a_len[i]] = batch.audio_features[i]
        ids[i, :t_len[i]] = batch.phoneme_ids[i]
    return feats, a_len, ids, t_len


def _check_finite(value: torch.Tensor, name: str, epoch: int, step: int) -> None:
    if not torch.isfinite(value):
        raise NumericsError(f"{name} is non-finite at epoch {epoch}, step {step}")


def _phoneme_loss(kind: str, flat_audio, flat_text, asyp: AsyPParams,
                  loss_cfg: LossConfig) -> torch.Tensor:
    if kind in ("asyp", "asyp_adams"):
        return asyp_phoneme_loss(flat_audio, flat_text, asyp)
    return baseline_phoneme_loss(kind, flat_audio, flat_text, asyp,
                                 temperature=loss_cfg.infonce_temperature,
                                 margin=loss_cfg.triplet_margin)


def forward_losses(model: KwsModel, batch: PhonemeBatch, loss_cfg: LossConfig,
                   train_cfg: TrainConfig, class_lookup: torch.Tensor):
    """All loss terms plus the embeddings they were computed from."""
    feats, a_len, ids, t_len = pad_batch(batch)
    e_a = model.acoustic(feats, a_len)
    e_t = model.text(ids, t_len)
    zero = torch.zeros((), dtype=DTYPE)

    phoneme_path = loss_cfg.phoneme != "none" or loss_cfg.adv.enabled_phn
    flat_audio = flat_text = None
    l_mm = zero
    l_phn = zero
    if phoneme_path:
        agg_rows, text_rows, mm_terms = [], [], []
        for i in range(len(batch)):
            res = cross_attend(e_t[i, :t_len[i]], e_a[i, :a_len[i]])
            agg_rows.append(res.aggregated)
            text_rows.append(e_t[i, :t_len[i]])
            if loss_cfg.monotonic:
                mm_terms.append(monotonic_matching_loss(
                    res.affinity, True, loss_cfg.band_width))
        labels = torch.cat(batch.phoneme_ids)
        flat_audio = FlatEmbeddings(torch.cat(agg_rows), labels)
        flat_text = FlatEmbeddings(torch.cat(text_rows), labels)
        if mm_terms:
            l_mm = torch.stack(mm_terms).mean()
        if loss_cfg.phoneme != "none":
            l_phn = _phoneme_loss(loss_cfg.phoneme, flat_audio, flat_text,
                                  model.asyp, loss_cfg)

    utt_audio = model.ccsp(e_a, a_len)
    utt_text = gap_pool_batch(e_t, t_len)

    l_utt = zero
    if loss_cfg.utterance == "rp":
        weights = RpLossWeights(loss_cfg.rp_dist_weight, loss_cfg.rp_angle_weight,
                                loss_cfg.rp_proto_weight)
        l_utt = utterance_rp_loss(utt_audio, utt_text, batch.keyword_ids, weights,
                                  delta=loss_cfg.rp_huber_delta,
                                  temperature=loss_cfg.rp_proto_temperature)

    l_key = zero
    if loss_cfg.classifier != "none":
        classes = class_lookup[batch.keyword_ids]
        if (classes < 0).any():
            raise ValueError("batch contains keywords outside the training split")
        if loss_cfg.classifier == "triplet":
            l_key = keyword_triplet_loss(utt_audio, classes,
                                         margin=loss_cfg.triplet_margin)
        else:
            l_key = model.head.loss(utt_audio, classes)

    l_adv_phn = zero
    l_adv_utt = zero
    if loss_cfg.adv.enabled_phn:
        l_adv_phn = adv_loss_phn(model.modality,
                                 grl(flat_audio.matrix, loss_cfg.adv.grl_scale),
                                 grl(flat_text.matrix, loss_cfg.adv.grl_scale))
    if loss_cfg.adv.enabled_utt:
        l_adv_utt = adv_loss_utt(model.modality,
                                 grl(utt_audio, loss_cfg.adv.grl_scale),
                                 grl(utt_text, loss_cfg.adv.grl_scale))

    terms = {"l_utt": l_utt, "l_key": l_key, "l_mm": l_mm, "l_phn": l_phn,
             "l_adv_phn": l_adv_phn, "l_adv_utt": l_adv_utt}
    embs = {"flat_audio": flat_audio, "flat_text": flat_text,
            "utt_audio": utt_audio, "utt_text": utt_text}
    return terms, embs


def _grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.pow(2).sum())
    return math.sqrt(total)


def train_step(state: TrainState, batch: PhonemeBatch, loss_cfg: LossConfig,
               train_cfg: TrainConfig) -> StepMetrics:
    """One forward pass, one joint optimizer update over both groups."""
    model = state.model
    model.train()
    terms, embs = forward_losses(model, batch, loss_cfg, train_cfg,
                                 state.class_lookup)
    for name, value in terms.items():
        _check_finite(value, name, state.epoch, state.step)

    l_emb = embedding_loss(terms["l_utt"], terms["l_key"], terms["l_mm"],
                           terms["l_phn"], train_cfg.lambda_phn)
    objective = l_emb
    adv_on = loss_cfg.adv.enabled_phn or loss_cfg.adv.enabled_utt
    if adv_on:
        objective = objective + loss_cfg.adv.lambda_ * (
            terms["l_adv_phn"] + terms["l_adv_utt"])

    state.optimizer.zero_grad(set_to_none=True)
    objective.backward()
    grad_norm_emb = _grad_norm(model.embedding_parameters())
    grad_norm_mod = _grad_norm(model.modality_parameters())
    torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
    state.optimizer.step()
    model.asyp.clamp_lambda_()
    state.step += 1

    if adv_on and loss_cfg.adv.enabled_phn:
        acc = modality_accuracy(model.modality, embs["flat_audio"],
                                embs["flat_text"])
    else:
        acc = modality_accuracy(model.modality, embs["utt_audio"],
                                embs["utt_text"])

    return StepMetrics(
        epoch=state.epoch, step=state.step,
        l_utt=float(terms["l_utt"].detach()), l_key=float(terms["l_key"].detach()),
        l_mm=float(terms["l_mm"].detach()), l_phn=float(terms["l_phn"].detach()),
        l_adv_phn=float(terms["l_adv_phn"].detach()),
        l_adv_utt=float(terms["l_adv_utt"].detach()),
        total=float(l_emb.detach()),
        grad_norm_emb=grad_norm_emb, grad_norm_mod=grad_norm_mod,
        modality_acc=acc, lr=state.optimizer.param_groups[0]["lr"],
    )
