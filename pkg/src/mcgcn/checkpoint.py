"""Checkpoints: a JSON manifest next to a raw little-endian float64 blob."""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from pathlib import Path

import numpy as np

from mcgcn import autodiff as ad
from mcgcn.message_passing import ModelConfig

FORMAT = "mcgcn-checkpoint/1"
MANIFEST = "model.json"
BLOB = "model.bin"


def save(directory, cfg: ModelConfig, params, seed: int, extra: dict | None = None) -> Path:
    """Write ``model.json`` and ``model.bin`` into ``directory``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layers, chunks, offset = [], [], 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data if isinstance(t, ad.Tensor) else t, dtype="<f8")
        layers.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    blob = b"".join(chunks)
    (directory / BLOB).write_bytes(blob)
    manifest = {
        "format": FORMAT,
        "blob": BLOB,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "seed": seed,
        "hyperparameters": cfg.to_dict(),
        "layers": layers,
        "extra": extra or {},
    }
    path = directory / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load(path):
    """Read a checkpoint from its manifest path or directory.

    Returns ``(ModelConfig, OrderedDict[name, Tensor], manifest)``.
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: not an {FORMAT} manifest")
    blob = (path.parent / manifest["blob"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ValueError(f"{path}: blob checksum mismatch")
    flat = np.frombuffer(blob, dtype="<f8")
    params = OrderedDict()
    for layer in manifest["layers"]:
        arr = flat[layer["offset"] : layer["offset"] + layer["count"]].astype(np.float64).reshape(layer["shape"])
        params[layer["name"]] = ad.variable(arr, name=layer["name"])
    cfg = ModelConfig(**manifest["hyperparameters"])
    return cfg, params, manifest
