"""Flat named-tensor checkpoints.

A checkpoint is a .npz archive: one array per parameter/buffer under its
state-dict name with '.' replaced by '/', plus a JSON metadata entry
(format version, system name, and the exact model-construction arguments).
"""

from __future__ import annotations

import json

import numpy as np
import torch

from .errors import ConfigurationError
from .model import PhySSM, build_model
from .specs import get_spec

__all__ = ["CHECKPOINT_FORMAT_VERSION", "save_checkpoint", "load_checkpoint"]

CHECKPOINT_FORMAT_VERSION = 1
_META_KEY = "__meta__"


def save_checkpoint(path: str, model: PhySSM, build_args: dict) -> None:
    """Write the model's tensors plus everything needed to rebuild it."""
    arrays = {
        name.replace(".", "/"): tensor.detach().cpu().numpy()
        for name, tensor in model.state_dict().items()
    }
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "system": model.spec.name,
        "build_args": build_args,
    }
    arrays[_META_KEY] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8
    )
    np.savez(path, **arrays)


def load_checkpoint(path: str) -> tuple[PhySSM, dict]:
    """Rebuild the model from a checkpoint; returns (model, metadata)."""
    with np.load(path) as archive:
        if _META_KEY not in archive:
            raise ConfigurationError(f"{path} is not a model checkpoint")
        meta = json.loads(bytes(archive[_META_KEY]).decode())
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ConfigurationError(
                f"unsupported checkpoint format {meta.get('format_version')}"
            )
        spec = get_spec(meta["system"])
        model = build_model(spec, **meta["build_args"])
        state = {
            key.replace("/", "."): torch.from_numpy(archive[key])
            for key in archive.files
            if key != _META_KEY
        }
    model.load_state_dict(state)
    return model, meta
