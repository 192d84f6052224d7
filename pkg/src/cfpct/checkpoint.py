"""Checkpoint container: JSON header plus little-endian float32 parameter arrays keyed by layer name."""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import numpy as np
import torch

from .errors import ShapeError, ValidationError

FORMAT = "cfpct-checkpoint"
VERSION = 1


def save_checkpoint(path: str | Path, modules: dict[str, torch.nn.Module], meta: dict) -> Path:
    """Write ``modules`` (name -> module) to a single ``.npz`` file.

    ``meta`` is stored verbatim (config echo, seed, anything JSON-able).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for prefix, module in modules.items():
        for key, tensor in module.state_dict().items():
            arrays[f"{prefix}.{key}"] = tensor.detach().cpu().numpy().astype("<f4")
    header = {"format": FORMAT, "version": VERSION, "modules": sorted(modules), **meta}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(Path(path)) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        arrays = {k: z[k] for k in z.files if k != "__header__"}
    if header.get("format") != FORMAT:
        raise ValidationError(f"{path} is not a {FORMAT} file")
    if header.get("version") != VERSION:
        raise ValidationError(f"unsupported checkpoint version {header.get('version')}")
    return header, arrays


def load_into(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    """Copy ``prefix.*`` arrays into ``module``, checking names and shapes."""
    state = module.state_dict()
    expected = {f"{prefix}.{k}" for k in state}
    found = {k for k in arrays if k.startswith(prefix + ".")}
    if expected != found:
        missing = sorted(expected - found)[:5]
        extra = sorted(found - expected)[:5]
        raise ShapeError(f"checkpoint/module mismatch for {prefix!r}: missing {missing}, unexpected {extra}")
    new_state = {}
    for k, t in state.items():
        arr = arrays[f"{prefix}.{k}"]
        if tuple(arr.shape) != tuple(t.shape):
            raise ShapeError(f"{prefix}.{k}: checkpoint shape {arr.shape} != model shape {tuple(t.shape)}")
        new_state[k] = torch.from_numpy(arr.astype(np.float32)).to(t.dtype)
    module.load_state_dict(new_state)


def parameter_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, t in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()
