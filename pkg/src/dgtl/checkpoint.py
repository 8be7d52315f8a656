"""Checkpoint files: a numpy ``.npz`` archive with a JSON header.

Layout (format_version 1):

``__meta__``
    uint8 array holding UTF-8 JSON with keys ``format`` (``"dgtl-checkpoint"``),
    ``format_version``, ``embedder_config``, ``param_order``, ``buffer_order``,
    ``velocity_order``, ``state`` and, when written by the trainer,
    ``train_config``.
``param/<name>``, ``buffer/<name>``, ``velocity/<name>``
    float64 arrays, stored in the order listed in the header.

Arrays are stored as raw ``.npy`` members, so a save/load round trip is bit-exact.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .embedder import Embedder, EmbedderConfig
from .errors import DataError

FORMAT = "dgtl-checkpoint"
FORMAT_VERSION = 1


def save_checkpoint(path, embedder: Embedder, velocity=None, state=None, train_config=None):
    velocity = velocity or {}
    meta = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "embedder_config": embedder.config.to_dict(),
        "param_order": list(embedder.params),
        "buffer_order": list(embedder.buffers),
        "velocity_order": list(velocity),
        "state": state or {},
    }
    if train_config is not None:
        meta["train_config"] = train_config
    arrays = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for prefix, group in (("param", embedder.params), ("buffer", embedder.buffers), ("velocity", velocity)):
        for name, arr in group.items():
            arrays[f"{prefix}/{name}"] = np.asarray(arr)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    """Return ``(embedder, velocity, meta)``."""
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data.files:
            raise DataError(f"{path}: not a dgtl checkpoint (missing header)")
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != FORMAT:
            raise DataError(f"{path}: unexpected format {meta.get('format')!r}")
        if meta.get("format_version") != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported format_version {meta.get('format_version')}")
        params = {n: data[f"param/{n}"].copy() for n in meta["param_order"]}
        buffers = {n: data[f"buffer/{n}"].copy() for n in meta["buffer_order"]}
        velocity = {n: data[f"velocity/{n}"].copy() for n in meta["velocity_order"]}
    config = EmbedderConfig.from_dict(meta["embedder_config"])
    return Embedder(config, params, buffers), velocity, meta
