"""Command-line entry points: gen-data, train, eval, ablate.

Any config key can be overridden from the environment with the prefix
``OPENKWS_``, using ``__`` as the path separator, e.g.
``OPENKWS_TRAIN__EPOCHS=2`` or ``OPENKWS_LOSSES__ADV__LAMBDA=0.2``.

Exit codes: 0 success, 2 config error, 3 numerical abort, 4 I/O error.
"""

from __future__ import annotations

import functools
import os
import sys
from pathlib import Path

import click
import torch
import yaml

from .config import (
    ConfigError,
    config_from_dict,
    config_to_dict,
    data_hash,
    load_config,
    merge_overrides,
)
from .data import Corpus, build_corpus
from .pipeline import evaluate_model, load_model, run_ladder, train_model
from .trainer import NumericsError

ENV_PREFIX = "OPENKWS_"

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _env_overrides(environ=None) -> dict:
    overrides: dict = {}
    for key, raw in sorted((environ or os.environ).items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        node = overrides
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = yaml.safe_load(raw)
    return overrides


def _load_run_config(config_path, overrides: dict | None = None):
    cfg_dict = config_to_dict(load_config(config_path))
    cfg_dict = merge_overrides(cfg_dict, _env_overrides())
    if overrides:
        cfg_dict = merge_overrides(cfg_dict, overrides)
    return config_from_dict(cfg_dict)


def _exit_codes(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except NumericsError as exc:
            click.echo(f"numerical abort: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)
        except OSError as exc:
            click.echo(f"i/o error: {exc}", err=True)
            sys.exit(EXIT_IO)
    return wrapper


@click.group()
def main():
    """Open-vocabulary keyword spotting experiments."""
    torch.set_num_threads(1)


@main.command("gen-data")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="override data.seed")
@_exit_codes
def cmd_gen_data(config_path, out_dir, seed):
    """Synthesize a keyword corpus and write it to --out."""
    overrides = {"data": {"seed": seed}} if seed is not None else None
    cfg = _load_run_config(config_path, overrides)
    corpus = build_corpus(cfg.data, data_hash=data_hash(cfg))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus.save(out)
    from .config import save_config
    save_config(cfg, out / "config.yaml")
    n_train = len(corpus.keywords("train"))
    n_eval = len(corpus.keywords("eval"))
    click.echo(f"corpus written to {out}: {n_train} train / {n_eval} eval "
               f"keywords, {len(corpus.utterances)} utterances")


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--corpus", "corpus_dir", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="override train.seed")
@_exit_codes
def cmd_train(config_path, corpus_dir, out_dir, seed):
    """Train a model on a generated corpus; writes checkpoint and logs."""
    overrides = {"train": {"seed": seed}} if seed is not None else None
    cfg = _load_run_config(config_path, overrides)
    corpus = Corpus.load(corpus_dir)
    expected = data_hash(cfg)
    if corpus.data_hash and corpus.data_hash != expected:
        raise ConfigError(
            f"corpus/config mismatch: corpus data hash {corpus.data_hash}, "
            f"config data hash {expected}")
    _, history, epoch_rows = train_model(cfg, corpus, out_dir=out_dir)
    click.echo(f"trained {cfg.train.epochs} epochs ({len(history)} steps); "
               f"final embedding loss {epoch_rows[-1]['total']:.6f}")


@main.command("eval")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option("--corpus", "corpus_dir", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path(),
              help="defaults to config.yaml next to the checkpoint")
@click.option("--seed", type=int, default=None, help="override eval.seed")
@_exit_codes
def cmd_eval(checkpoint_path, corpus_dir, out_dir, config_path, seed):
    """Score held-out trials with a checkpoint and report AP/EER/AUC."""
    if config_path is None:
        config_path = Path(checkpoint_path).parent / "config.yaml"
    overrides = {"eval": {"seed": seed}} if seed is not None else None
    cfg = _load_run_config(config_path, overrides)
    corpus = Corpus.load(corpus_dir)
    try:
        model = load_model(checkpoint_path, cfg, corpus)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    report = evaluate_model(cfg, corpus, model, out_dir=out_dir)
    click.echo(f"AP {report['ap']:.4f}  EER {report['eer']:.4f}  "
               f"AUC {report['auc']:.4f}  ({report['n_trials']} trials)")


@main.command("ablate")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--ladder", "ladder_path", required=True, type=click.Path())
@click.option("--corpus", "corpus_dir", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--jobs", type=int, default=1, help="parallel rung workers")
@_exit_codes
def cmd_ablate(config_path, ladder_path, corpus_dir, out_dir, jobs):
    """Run a ladder of config overlays and tabulate mean/std metrics."""
    cfg = _load_run_config(config_path)
    ladder_file = Path(ladder_path)
    if not ladder_file.exists():
        raise ConfigError(f"ladder spec not found: {ladder_file}")
    with open(ladder_file) as fh:
        spec = yaml.safe_load(fh) or {}
    seeds = spec.get("seeds")
    rung_specs = spec.get("rungs")
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("ladder spec needs a non-empty 'seeds' list")
    if not isinstance(rung_specs, list) or not rung_specs:
        raise ConfigError("ladder spec needs a non-empty 'rungs' list")
    rungs = []
    for i, entry in enumerate(rung_specs):
        if not isinstance(entry, dict) or "name" not in entry:
            raise ConfigError(f"ladder rung {i} needs a 'name'")
        rungs.append((str(entry["name"]), entry.get("overrides") or {}))
    if len({name for name, _ in rungs}) != len(rungs):
        raise ConfigError("ladder rung names must be unique")
    base = config_to_dict(cfg)
    # validate every rung's merged config before any training starts
    for name, overrides in rungs:
        try:
            config_from_dict(merge_overrides(base, overrides))
        except ConfigError as exc:
            raise ConfigError(f"rung {name!r}: {exc}") from exc
    outcome = run_ladder(base, rungs, [int(s) for s in seeds], corpus_dir,
                         out_dir, n_jobs=jobs)
    for row in outcome["rows"]:
        click.echo(f"{row['rung']:>16}  AP {row['ap_mean']:.4f} ± "
                   f"{row['ap_std']:.4f}  EER {row['eer_mean']:.4f}  "
                   f"AUC {row['auc_mean']:.4f}")


if __name__ == "__main__":
    main()
