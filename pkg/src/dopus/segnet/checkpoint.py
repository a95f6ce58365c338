"""Self-describing model checkpoints: a versioned JSON header plus flat arrays in one .npz."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .model import DopUsNet, DopUsVariant

__all__ = ["FORMAT", "VERSION", "save_checkpoint", "load_checkpoint"]

FORMAT = "dopus-checkpoint"
VERSION = 1


def save_checkpoint(model: DopUsNet, path: str | Path, resolution: int, extra: dict | None = None) -> Path:
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    header = {
        "format": FORMAT,
        "version": VERSION,
        "variant": {**asdict(model.variant), "widths": list(model.variant.widths)},
        "resolution": int(resolution),
        "tensors": {k: {"shape": list(v.shape), "dtype": str(v.dtype).replace("torch.", "")}
                    for k, v in state.items()},
        "extra": extra or {},
    }
    arrays = {f"t{i}": v.detach().cpu().numpy() for i, v in enumerate(state.values())}
    names = list(state.keys())
    header["order"] = names
    with path.open("wb") as fh:
        np.savez(fh, header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
                 **arrays)
    return path


def load_checkpoint(path: str | Path):
    """Returns (model in eval mode, header dict)."""
    with np.load(Path(path)) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("format") != FORMAT:
            raise ValueError(f"{path} is not a {FORMAT} file")
        if header.get("version") != VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        v = dict(header["variant"])
        v["widths"] = tuple(v["widths"])
        model = DopUsNet(DopUsVariant(**v))
        state = {name: torch.from_numpy(np.array(z[f"t{i}"])) for i, name in enumerate(header["order"])}
    model.load_state_dict(state)
    model.eval()
    return model, header
