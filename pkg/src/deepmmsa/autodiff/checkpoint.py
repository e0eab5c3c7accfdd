"""Parameter checkpoints: a JSON manifest plus a raw float32 little-endian blob.

The manifest lists tensors in blob order::

    {"format": "deepmmsa-checkpoint", "version": 1, "blob": "model.bin",
     "tensors": [{"name": "stem.conv.weight", "shape": [8, 1, 3, 7, 7]}, ...],
     "meta": {...}}
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT = "deepmmsa-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    blob_path = path.with_suffix(".bin")
    entries = []
    with open(blob_path, "wb") as fh:
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            entries.append({"name": name, "shape": list(arr.shape)})
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    manifest = {"format": FORMAT, "version": VERSION, "blob": blob_path.name,
                "dtype": "f32le", "tensors": entries, "meta": meta or {}}
    path.write_text(json.dumps(manifest, indent=2, sort_keys=False))
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint manifest not found: {path}") from None
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: not a supported checkpoint manifest")
    if manifest.get("dtype", "f32le") != "f32le":
        raise CheckpointError(f"{path}: unsupported dtype {manifest['dtype']!r}")
    raw = (path.parent / manifest["blob"]).read_bytes()
    expected = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in manifest["tensors"]) * 4
    if len(raw) != expected:
        raise CheckpointError(f"{path}: blob holds {len(raw)} bytes, manifest describes {expected}")
    flat = np.frombuffer(raw, dtype="<f4")
    tensors, pos = {}, 0
    for e in manifest["tensors"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        tensors[e["name"]] = flat[pos:pos + size].reshape(e["shape"]).astype(np.float32)
        pos += size
    return tensors, manifest.get("meta", {})
