"""Synthetic keyword corpus.

Keywords are distinct phoneme index sequences; "audio" for an utterance
is a frame sequence built from per-phoneme prototype vectors plus
per-phoneme jitter, a per-utterance speaker offset, and per-frame noise.
Shared phonemes across keywords create genuine hard negatives. Train and
eval keyword sets are disjoint, so evaluation is open-vocabulary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DataConfig
from .metrics import Trial, TrialSet
from .seeding import substream_rng


@dataclass
class Lexicon:
    """Keyword id -> phoneme index sequence; ids are list positions."""

    sequences: list[tuple[int, ...]]
    vocab_size: int

    def __len__(self) -> int:
        return len(self.sequences)


def build_lexicon(num_keywords: int, vocab_size: int,
                  length_range: tuple[int, int], rng: np.random.Generator) -> Lexicon:
    """Draw pairwise-distinct phoneme sequences with lengths in the range."""
    lo, hi = length_range
    if lo < 1 or hi < lo or vocab_size < 1:
        raise ValueError(f"invalid length range {length_range} or vocab {vocab_size}")
    capacity = sum(vocab_size ** n for n in range(lo, hi + 1))
    if capacity < num_keywords:
        raise ValueError(
            f"cannot build {num_keywords} distinct keywords: only {capacity} "
            f"sequences exist for V={vocab_size}, lengths {lo}..{hi}"
        )
    seen: set[tuple[int, ...]] = set()
    sequences: list[tuple[int, ...]] = []
    while len(sequences) < num_keywords:
        length = int(rng.integers(lo, hi + 1))
        seq = tuple(int(p) for p in rng.integers(0, vocab_size, size=length))
        if seq not in seen:
            seen.add(seq)
            sequences.append(seq)
    return Lexicon(sequences=sequences, vocab_size=vocab_size)


@dataclass
class SynthesisProfile:
    """Fixed per-corpus phoneme prototypes and noise scales."""

    prototypes: np.ndarray  # (V, F)
    dur_min: int = 2
    dur_max: int = 5
    jitter_sigma: float = 0.3
    speaker_sigma: float = 0.2
    noise_sigma: float = 0.1

    def __post_init__(self):
        if self.dur_min < 1 or self.dur_max < self.dur_min:
            raise ValueError("need 1 <= dur_min <= dur_max")
        if min(self.jitter_sigma, self.speaker_sigma, self.noise_sigma) < 0:
            raise ValueError("noise scales must be nonnegative")


def synthesize_utterance(profile: SynthesisProfile, phoneme_seq,
                         rng: np.random.Generator) -> np.ndarray:
    """One (T_a, F) feature matrix for a phoneme sequence.

    Each phoneme emits dur_min..dur_max frames of its prototype, shifted
    by a per-phoneme jitter, a per-utterance speaker offset, and
    per-frame noise. T_a >= len(phoneme_seq) since durations are >= 1.
    """
    if len(phoneme_seq) == 0:
        raise ValueError("cannot synthesize an empty phoneme sequence")
    n_feats = profile.prototypes.shape[1]
    speaker = rng.normal(0.0, profile.speaker_sigma, size=n_feats)
    frames = []
    for p in phoneme_seq:
        dur = int(rng.integers(profile.dur_min, profile.dur_max + 1))
        jitter = rng.normal(0.0, profile.jitter_sigma, size=n_feats)
        base = profile.prototypes[p] + jitter + speaker
        frames.append(base + rng.normal(0.0, profile.noise_sigma, size=(dur, n_feats)))
    return np.concatenate(frames, axis=0)


@dataclass
class Utterance:
    utt_id: int
    keyword_id: int
    features: np.ndarray  # (T, F) float64, mean-normalized per utterance


class Corpus:
    """Lexicon, synthesized utterances, and the disjoint train/eval split."""

    def __init__(self, lexicon: Lexicon, utterances: list[Utterance],
                 split: dict[int, str], feat_dim: int, seed: int, data_hash: str):
        self.lexicon = lexicon
        self.utterances = utterances
        self.split = split
        self.feat_dim = feat_dim
        self.seed = seed
        self.data_hash = data_hash
        self._by_keyword: dict[int, list[int]] = {}
        for utt in utterances:
            self._by_keyword.setdefault(utt.keyword_id, []).append(utt.utt_id)

    @property
    def vocab_size(self) -> int:
        return self.lexicon.vocab_size

    def keywords(self, split: str) -> list[int]:
        return [k for k in range(len(self.lexicon)) if self.split[k] == split]

    def phonemes(self, keyword_id: int) -> tuple[int, ...]:
        return self.lexicon.sequences[keyword_id]

    def utterance_ids(self, keyword_id: int) -> list[int]:
        return self._by_keyword.get(keyword_id, [])

    def features(self, utt_id: int) -> np.ndarray:
        return self.utterances[utt_id].features

    def segments(self, split: str) -> list[tuple[int, int]]:
        """(keyword id, utterance id) pairs for one split."""
        wanted = set(self.keywords(split))
        return [(u.keyword_id, u.utt_id) for u in self.utterances
                if u.keyword_id in wanted]

    def train_class_index(self) -> dict[int, int]:
        """Keyword id -> contiguous class index over the train split."""
        return {kw: i for i, kw in enumerate(self.keywords("train"))}

    def make_trials(self, split: str, neg_ratio: int,
                    rng: np.random.Generator) -> TrialSet:
        trials = generate_trials(self.segments(split), self.keywords(split),
                                 neg_ratio, rng)
        for t in trials.trials:
            t.phonemes = self.phonemes(t.keyword_id)
        return trials

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        feat_dir = out_dir / "features"
        feat_dir.mkdir(parents=True, exist_ok=True)
        records = []
        for utt in self.utterances:
            rel = f"features/utt{utt.utt_id:05d}.npy"
            np.save(out_dir / rel, utt.features.astype("<f8"))
            records.append({"id": utt.utt_id, "keyword_id": utt.keyword_id,
                            "path": rel, "frames": int(utt.features.shape[0])})
        manifest = {
            "format": "openkws-corpus-v1",
            "seed": self.seed,
            "data_hash": self.data_hash,
            "vocab_size": self.lexicon.vocab_size,
            "feat_dim": self.feat_dim,
            "keywords": [
                {"id": k, "phonemes": list(seq), "split": self.split[k]}
                for k, seq in enumerate(self.lexicon.sequences)
            ],
            "utterances": records,
        }
        with open(out_dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, corpus_dir) -> "Corpus":
        corpus_dir = Path(corpus_dir)
        manifest_path = corpus_dir / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no corpus manifest at {manifest_path}")
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        keywords = sorted(manifest["keywords"], key=lambda r: r["id"])
        lexicon = Lexicon(
            sequences=[tuple(r["phonemes"]) for r in keywords],
            vocab_size=manifest["vocab_size"],
        )
        split = {r["id"]: r["split"] for r in keywords}
        utterances = [
            Utterance(utt_id=r["id"], keyword_id=r["keyword_id"],
                      features=np.load(corpus_dir / r["path"]))
            for r in sorted(manifest["utterances"], key=lambda r: r["id"])
        ]
        return cls(lexicon, utterances, split, manifest["feat_dim"],
                   manifest["seed"], manifest["data_hash"])


def build_corpus(cfg: DataConfig, data_hash: str = "") -> Corpus:
    """Deterministically synthesize a corpus from its config."""
    total = cfg.num_train_keywords + cfg.num_eval_keywords
    lexicon = build_lexicon(total, cfg.vocab_size,
                            (cfg.min_phonemes, cfg.max_phonemes),
                            substream_rng(cfg.seed, "lexicon"))
    profile = SynthesisProfile(
        prototypes=substream_rng(cfg.seed, "prototypes").standard_normal(
            (cfg.vocab_size, cfg.feat_dim)),
        dur_min=cfg.min_duration, dur_max=cfg.max_duration,
        jitter_sigma=cfg.jitter_sigma, speaker_sigma=cfg.speaker_sigma,
        noise_sigma=cfg.noise_sigma,
    )
    split = {k: ("train" if k < cfg.num_train_keywords else "eval")
             for k in range(total)}
    counts = {"train": cfg.train_utterances_per_keyword,
              "eval": cfg.eval_utterances_per_keyword}
    rng = substream_rng(cfg.seed, "utterances")
    utterances = []
    for kw in range(total):
        for _ in range(counts[split[kw]]):
            feats = synthesize_utterance(profile, lexicon.sequences[kw], rng)
            feats = feats - feats.mean(axis=0, keepdims=True)
            utterances.append(Utterance(utt_id=len(utterances), keyword_id=kw,
                                        features=feats))
    return Corpus(lexicon, utterances, split, cfg.feat_dim, cfg.seed, data_hash)


def generate_trials(segments: list[tuple[int, int]], enrolled: list[int],
                    neg_ratio: int, rng: np.random.Generator) -> TrialSet:
    """All matched (keyword, segment) pairs plus sampled mismatched pairs.

    Negatives are drawn without replacement from the mismatch pool when it
    is large enough; otherwise with replacement, flagged on the result.
    """
    if neg_ratio < 0:
        raise ValueError("neg_ratio must be nonnegative")
    seg_keywords = {kw for kw, _ in segments}
    missing = [kw for kw in enrolled if kw not in seg_keywords]
    if missing:
        raise ValueError(f"enrolled keywords without segments: {missing[:5]}")
    positives = [(kw, utt) for kw in enrolled for skw, utt in segments if skw == kw]
    if not positives:
        raise ValueError("no positive trials possible")
    pool = [(kw, utt) for kw in enrolled for skw, utt in segments if skw != kw]
    n_neg = neg_ratio * len(positives)
    with_replacement = n_neg > len(pool)
    if n_neg == 0:
        negatives = []
    else:
        picks = rng.choice(len(pool), size=n_neg, replace=with_replacement)
        negatives = [pool[i] for i in picks]
    trials = [Trial(keyword_id=kw, utterance_id=utt, label=1)
              for kw, utt in positives]
    trials += [Trial(keyword_id=kw, utterance_id=utt, label=0)
               for kw, utt in negatives]
    return TrialSet(trials=trials, with_replacement=with_replacement)
