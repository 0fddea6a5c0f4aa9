"""Parameter checkpoint archive.

A checkpoint is a single ``.npz`` archive mapping hierarchical parameter
names ("acoustic/convs/0/weight", ...) to shape-tagged little-endian
float64 arrays, plus a JSON manifest (config hash, RNG seed, epoch)
stored under a reserved key.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

MANIFEST_KEY = "__manifest__"


def save_checkpoint(path, state_dict: dict[str, torch.Tensor], manifest: dict) -> None:
    arrays = {}
    for name, tensor in state_dict.items():
        arr = tensor.detach().cpu().numpy()
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8")
        arrays[name.replace(".", "/")] = arr
    arrays[MANIFEST_KEY] = np.frombuffer(
        json.dumps(manifest, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path) as data:
        manifest = json.loads(bytes(data[MANIFEST_KEY]).decode("utf-8"))
        state = {
            name.replace("/", "."): torch.from_numpy(np.ascontiguousarray(data[name]))
            for name in data.files if name != MANIFEST_KEY
        }
    return state, manifest
