"""Versioned parameter store: one npz file keyed by layer parameter name.

A ``__meta__`` entry carries a JSON header (schema version plus whatever the
caller wants to stash, typically the experiment config and its hash) encoded
as uint8 so the archive stays pickle-free.
"""

from __future__ import annotations

import json

import numpy as np

CHECKPOINT_VERSION = 1
_META_KEY = "__meta__"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict, meta: dict | None = None):
    """``params`` maps parameter name to its array (or Param)."""
    header = {"checkpoint_version": CHECKPOINT_VERSION, "meta": meta or {}}
    blob = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    arrays = {_META_KEY: blob}
    for name, p in params.items():
        if name == _META_KEY:
            raise CheckpointError(f"parameter name {_META_KEY!r} is reserved")
        arrays[name] = np.asarray(getattr(p, "value", p))
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path):
    """Returns ``(params: {name: ndarray}, meta: dict)``."""
    with np.load(path, allow_pickle=False) as data:
        if _META_KEY not in data:
            raise CheckpointError(f"{path}: not a checkpoint (missing {_META_KEY})")
        header = json.loads(bytes(data[_META_KEY]).decode("utf-8"))
        version = header.get("checkpoint_version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {version!r} "
                f"(expected {CHECKPOINT_VERSION})"
            )
        params = {k: np.array(data[k]) for k in data.files if k != _META_KEY}
    return params, header["meta"]


def assign_params(model_params: dict, loaded: dict):
    """Copy loaded arrays into a model's Param dict, checking exact coverage."""
    missing = set(model_params) - set(loaded)
    extra = set(loaded) - set(model_params)
    if missing or extra:
        raise CheckpointError(
            f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
        )
    for name, p in model_params.items():
        if p.value.shape != loaded[name].shape:
            raise CheckpointError(
                f"shape mismatch for {name}: model {p.value.shape}, file {loaded[name].shape}"
            )
        p.value[...] = loaded[name]
