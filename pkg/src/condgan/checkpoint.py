"""Checkpoints: a flat container of named parameter arrays with the
architecture config serialized alongside. The format is a plain ``.npz``
archive whose keys are ``<module>.<parameter>`` paths plus one JSON metadata
entry, stable across versions."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import torch

from .networks import ArchitectureConfig

META_KEY = "__meta__"


def save_checkpoint(path, modules: dict, arch: ArchitectureConfig, extra=None):
    """Write named parameter arrays for each module plus config metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, module in modules.items():
        for pname, value in module.state_dict().items():
            arrays[f"{name}.{pname}"] = value.detach().cpu().numpy()
    meta = {
        "architecture": dataclasses.asdict(arch),
        "extra": extra or {},
    }
    arrays[META_KEY] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8
    )
    np.savez(path, **arrays)
    return path


def load_checkpoint(path):
    """Return (parameter arrays by dotted name, metadata dict)."""
    with np.load(Path(path)) as archive:
        arrays = {k: archive[k] for k in archive.files if k != META_KEY}
        meta = json.loads(archive[META_KEY].tobytes().decode())
    arch_fields = dict(meta["architecture"])
    arch_fields["channel_schedule"] = tuple(arch_fields.get("channel_schedule") or ())
    meta["architecture"] = ArchitectureConfig(**arch_fields)
    return arrays, meta


def restore_module(module: torch.nn.Module, arrays: dict, prefix: str):
    """Load the arrays saved under ``prefix.`` into a module."""
    state = {}
    marker = prefix + "."
    for key, value in arrays.items():
        if key.startswith(marker):
            state[key[len(marker):]] = torch.as_tensor(value)
    if not state:
        raise KeyError(f"checkpoint holds no parameters under {prefix!r}")
    module.load_state_dict(state)
    return module
