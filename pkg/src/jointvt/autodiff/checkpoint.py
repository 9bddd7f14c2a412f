"""Directory checkpoints: ``manifest.json`` plus raw little-endian ``weights.bin``.

Every tensor is stored as float32 in manifest order, so a float32 model
round-trips bit for bit.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


def save_arrays(path, arrays: dict, extra: dict | None = None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path / "weights.bin", "wb") as f:
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": "float32",
                            "offset": offset, "nbytes": len(raw)})
            f.write(raw)
            offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "tensors": entries}
    if extra:
        manifest.update(extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_arrays(path):
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format_version')}")
    blob = (path / "weights.bin").read_bytes()
    arrays = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float32)
    return arrays, manifest


def module_arrays(module, prefix=""):
    out = {}
    for name, p in module.named_parameters():
        out[prefix + name] = p.data
    for name, b in module.named_buffers():
        out[prefix + "buffer." + name] = b
    return out


def load_module_arrays(module, arrays, prefix=""):
    params = dict(module.named_parameters())
    for name, p in params.items():
        key = prefix + name
        if key not in arrays:
            raise KeyError(f"checkpoint is missing parameter {key}")
        if tuple(arrays[key].shape) != p.shape:
            raise ValueError(f"{key}: checkpoint shape {arrays[key].shape} != model shape {p.shape}")
        p.data = arrays[key].astype(p.data.dtype).copy()
    for name, _ in list(module.named_buffers()):
        key = prefix + "buffer." + name
        if key not in arrays:
            raise KeyError(f"checkpoint is missing buffer {key}")
        module.set_buffer(name, arrays[key])
