"""Deterministic fan-out of one root seed into named substreams.

Every source of randomness in a run (data synthesis, parameter init,
batch sampling, trial sampling, probes) draws from its own named stream,
so ablation rungs differ only in the factor under study.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def substream_seed(root: int, name: str) -> int:
    digest = hashlib.sha256(f"{root}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def substream_rng(root: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(root, name))


def substream_generator(root: int, name: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(substream_seed(root, name))
    return gen
