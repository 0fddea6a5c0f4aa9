"""End-to-end runs: train, evaluate, and the ablation ladder.

Every run is reproducible from (resolved config, corpus): parameter
init, batch order, trial sampling, and probes all draw from named
substreams of the run's seeds. Ladder rungs share one corpus and one
trial set so they differ only in the loss configuration.
"""

from __future__ import annotations

import json
from concurrent.futures import FIRST_EXCEPTION, ProcessPoolExecutor, wait
from pathlib import Path

import numpy as np
import torch

from . import reporting
from .alignment import cross_attend
from .batching import DTYPE
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    RunConfig,
    config_from_dict,
    config_hash,
    config_to_dict,
    data_hash,
    merge_overrides,
    save_config,
)
from .data import Corpus
from .encoders import gap_pool_batch
from .metrics import auc, average_precision, eer, score_trials
from .seeding import substream_generator, substream_rng
from .trainer import BatchSampler, KwsModel, TrainState, lr_at, pad_batch, train_step


def make_model(cfg: RunConfig, corpus: Corpus) -> KwsModel:
    model = KwsModel(cfg.model, cfg.losses, vocab_size=corpus.vocab_size,
                     feat_dim=corpus.feat_dim,
                     num_classes=len(corpus.keywords("train")))
    model.reset_parameters(substream_generator(cfg.train.seed, "init"))
    model.assert_parameter_partition()
    return model


def _class_lookup(corpus: Corpus) -> torch.Tensor:
    lookup = torch.full((len(corpus.lexicon),), -1, dtype=torch.long)
    for kw, idx in corpus.train_class_index().items():
        lookup[kw] = idx
    return lookup


def train_model(cfg: RunConfig, corpus: Corpus, out_dir=None):
    """Train from scratch; returns (state, step metrics, epoch summaries)."""
    if corpus.data_hash and corpus.data_hash != data_hash(cfg):
        raise ValueError(
            f"corpus was generated from a different data config: "
            f"corpus hash {corpus.data_hash}, config hash {data_hash(cfg)}")
    model = make_model(cfg, corpus)
    optimizer = torch.optim.AdamW(
        [{"params": model.embedding_parameters(),
          "weight_decay": cfg.train.weight_decay},
         {"params": model.modality_parameters(),
          "weight_decay": cfg.losses.adv.classifier_weight_decay}],
        lr=cfg.train.base_lr)
    state = TrainState(model=model, optimizer=optimizer,
                       class_lookup=_class_lookup(corpus))
    sampler = BatchSampler(corpus, cfg.train.keywords_per_batch,
                           cfg.train.utterances_per_keyword,
                           substream_rng(cfg.train.seed, "batching"))
    history = []
    epoch_rows = []
    for epoch in range(cfg.train.epochs):
        state.epoch = epoch
        lr = lr_at(epoch, cfg.train)
        for group in optimizer.param_groups:
            group["lr"] = lr
        epoch_metrics = []
        for batch in sampler.epoch():
            metrics = train_step(state, batch, cfg.losses, cfg.train)
            history.append(metrics)
            epoch_metrics.append(metrics)
        row = {"epoch": epoch, "lr": lr, "steps": len(epoch_metrics)}
        for key in ("l_utt", "l_key", "l_mm", "l_phn", "l_adv_phn",
                    "l_adv_utt", "total", "modality_acc"):
            row[key] = float(np.mean([getattr(m, key) for m in epoch_metrics]))
        epoch_rows.append(row)
        if out_dir is not None and cfg.train.checkpoint_every > 0 \
                and (epoch + 1) % cfg.train.checkpoint_every == 0 \
                and (epoch + 1) < cfg.train.epochs:
            _save_model(out_dir, f"checkpoint_epoch{epoch + 1:04d}.npz",
                        cfg, model, epoch + 1)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out_dir / "config.yaml")
        reporting.write_jsonl(out_dir / "steps.jsonl",
                              (m.to_dict() for m in history))
        reporting.write_jsonl(out_dir / "epochs.jsonl", epoch_rows)
        reporting.training_curves(epoch_rows, out_dir / "training_curves.png")
        _save_model(out_dir, "checkpoint.npz", cfg, model, cfg.train.epochs)
    return state, history, epoch_rows


def _save_model(out_dir, name: str, cfg: RunConfig, model: KwsModel,
                epoch: int) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "openkws-checkpoint-v1", "config_hash": config_hash(cfg),
                "data_hash": data_hash(cfg), "seed": cfg.train.seed,
                "epoch": epoch}
    save_checkpoint(out_dir / name, model.state_dict(), manifest)


def load_model(checkpoint_path, cfg: RunConfig, corpus: Corpus) -> KwsModel:
    state_dict, manifest = load_checkpoint(checkpoint_path)
    if manifest.get("config_hash") != config_hash(cfg):
        raise ValueError(
            f"checkpoint config hash {manifest.get('config_hash')} does not "
            f"match this config ({config_hash(cfg)})")
    model = KwsModel(cfg.model, cfg.losses, vocab_size=corpus.vocab_size,
                     feat_dim=corpus.feat_dim,
                     num_classes=len(corpus.keywords("train")))
    model.load_state_dict(state_dict)
    return model


def evaluate_model(cfg: RunConfig, corpus: Corpus, model: KwsModel,
                   out_dir=None) -> dict:
    """Score held-out trials and report AP / EER / AUC."""
    trials = corpus.make_trials("eval", cfg.eval.neg_ratio,
                                substream_rng(cfg.eval.seed, "trials"))
    scored = score_trials(model, corpus, trials)
    labels = scored.labels()
    report = {
        "ap": average_precision(scored.scores, labels),
        "eer": eer(scored.scores, labels),
        "auc": auc(scored.scores, labels),
        "n_trials": len(scored),
        "n_positive": int(labels.sum()),
        "n_negative": int((1 - labels).sum()),
        "neg_ratio": cfg.eval.neg_ratio,
        "with_replacement": scored.with_replacement,
        "config_hash": config_hash(cfg),
        "data_hash": data_hash(cfg),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out_dir / "config.yaml")
        reporting.write_scores(out_dir / "scores.tsv", scored)
        reporting.write_report(out_dir / "report.json", report)
        reporting.score_figure(scored, report, out_dir / "scores.png")
    return report


def collect_modal_embeddings(model: KwsModel, corpus: Corpus, split: str = "eval",
                             limit: int | None = None):
    """Frozen phoneme- and utterance-level embeddings for both modalities.

    Used by modality probes: rows are (flattened aligned audio + pooled
    audio) vs (flattened text + pooled text). ``limit`` caps the number
    of utterances encoded.
    """
    from .batching import PhonemeBatch

    segments = corpus.segments(split)
    if limit is not None:
        segments = segments[:limit]
    feats = [torch.as_tensor(corpus.features(u), dtype=DTYPE) for _, u in segments]
    ids = [torch.tensor(corpus.phonemes(kw), dtype=torch.long) for kw, _ in segments]
    batch = PhonemeBatch(audio_features=feats, phoneme_ids=ids,
                         keyword_ids=torch.tensor([kw for kw, _ in segments]))
    model.eval()
    with torch.no_grad():
        padded, a_len, pid, t_len = pad_batch(batch)
        e_a = model.acoustic(padded, a_len)
        e_t = model.text(pid, t_len)
        agg_rows, text_rows = [], []
        for i in range(len(batch)):
            res = cross_attend(e_t[i, :t_len[i]], e_a[i, :a_len[i]])
            agg_rows.append(res.aggregated)
            text_rows.append(e_t[i, :t_len[i]])
        utt_a = model.ccsp(e_a, a_len)
        utt_t = gap_pool_batch(e_t, t_len)
        audio = torch.cat([torch.cat(agg_rows), utt_a])
        text = torch.cat([torch.cat(text_rows), utt_t])
    return audio, text


def run_rung(base_config: dict, overrides: dict, seed: int, corpus: Corpus,
             out_dir=None) -> dict:
    """Train + evaluate one ladder rung at one seed."""
    merged = merge_overrides(base_config, {"train": {"seed": seed}})
    merged = merge_overrides(merged, overrides or {})
    cfg = config_from_dict(merged)
    state, _, _ = train_model(cfg, corpus, out_dir=out_dir)
    return evaluate_model(cfg, corpus, state.model, out_dir=out_dir)


def _ladder_job(args):
    base_config, name, overrides, seed, corpus_dir, out_dir = args
    torch.set_num_threads(1)
    corpus = Corpus.load(corpus_dir)
    report = run_rung(base_config, overrides, seed, corpus, out_dir=out_dir)
    return name, seed, report


def standard_ladder_rungs() -> list[tuple[str, dict]]:
    """The five-rung comparison used by the trend experiments."""
    off = {"enabled_phn": False, "enabled_utt": False}
    return [
        ("utt_rp", {"losses": {"phoneme": "none", "classifier": "none",
                               "adv": dict(off)}}),
        ("phn_asyp_adams", {"losses": {"phoneme": "asyp_adams",
                                       "classifier": "none", "adv": dict(off)}}),
        ("phn_mal", {"losses": {"phoneme": "asyp_adams", "classifier": "none",
                                "adv": {"enabled_phn": True, "enabled_utt": False}}}),
        ("utt_mal", {"losses": {"phoneme": "asyp_adams", "classifier": "none",
                                "adv": {"enabled_phn": True, "enabled_utt": True}}}),
        ("sphereface2", {"losses": {"phoneme": "asyp_adams",
                                    "classifier": "sphereface2",
                                    "adv": {"enabled_phn": True,
                                            "enabled_utt": True}}}),
    ]


def run_ladder(base_config: dict, rungs: list[tuple[str, dict]], seeds: list[int],
               corpus_dir, out_dir, n_jobs: int = 1) -> dict:
    """Train and evaluate every (rung, seed); emit the comparison table.

    On any failure, partial results are written before the error
    propagates.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(config_from_dict(base_config), out_dir / "config.yaml")
    jobs = [(base_config, name, overrides, seed, str(corpus_dir),
             str(out_dir / "runs" / name / f"seed{seed:02d}"))
            for name, overrides in rungs for seed in seeds]
    results: dict[str, dict[int, dict]] = {name: {} for name, _ in rungs}
    failure = None
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            futures = [pool.submit(_ladder_job, job) for job in jobs]
            done, pending = wait(futures, return_when=FIRST_EXCEPTION)
            for fut in done:
                exc = fut.exception()
                if exc is not None:
                    failure = exc
                    for p in pending:
                        p.cancel()
                    break
                name, seed, report = fut.result()
                results[name][seed] = report
    else:
        for job in jobs:
            try:
                name, seed, report = _ladder_job(job)
            except Exception as exc:
                failure = exc
                break
            results[name][seed] = report

    rows = []
    for name, _ in rungs:
        per_seed = results[name]
        if not per_seed:
            continue
        row = {"rung": name, "n_seeds": len(per_seed)}
        for metric in ("ap", "eer", "auc"):
            values = [per_seed[s][metric] for s in sorted(per_seed)]
            row[f"{metric}_mean"] = float(np.mean(values))
            row[f"{metric}_std"] = float(np.std(values))
        rows.append(row)
    reporting.write_ladder_table(out_dir / "ladder.tsv", rows)
    reporting.ladder_figure(rows, out_dir / "ladder.png")
    with open(out_dir / "results.json", "w") as fh:
        json.dump({name: {str(s): r for s, r in per.items()}
                   for name, per in results.items()}, fh, indent=1, sort_keys=True)
    if failure is not None:
        raise failure
    return {"rows": rows, "results": results}
