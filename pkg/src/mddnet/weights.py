"""Flat little-endian float32 weight files with a JSON manifest.

A weight directory holds ``weights.bin`` (all arrays back to back) and
``manifest.json`` mapping each name to its byte offset and shape, plus any
extra metadata.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Mapping

import numpy as np

from .vit import Module

MANIFEST = "manifest.json"
BLOB = "weights.bin"


def save_arrays(arrays: Mapping[str, np.ndarray], directory: str | Path, meta: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    offset = 0
    tmp = directory / (BLOB + ".tmp")
    with open(tmp, "wb") as fh:
        for name, arr in arrays.items():
            buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries[name] = {"offset": offset, "shape": list(np.shape(arr))}
            fh.write(buf)
            offset += len(buf)
    manifest = dict(meta or {})
    manifest["params"] = entries
    os.replace(tmp, directory / BLOB)
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2))


def load_arrays(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    blob = (directory / BLOB).read_bytes()
    arrays = {}
    for name, e in manifest.pop("params").items():
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"])
        arrays[name] = arr.reshape(e["shape"]).astype(np.float32)
    return arrays, manifest


def module_state(module: Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + n: p.data for n, p in module.named_parameters()}


def load_module_state(module: Module, arrays: Mapping[str, np.ndarray], prefix: str = "",
                      strict: bool = True) -> None:
    for name, p in module.named_parameters():
        key = prefix + name
        if key not in arrays:
            if strict:
                raise KeyError(f"weight file has no entry for {key}")
            continue
        value = arrays[key]
        if tuple(value.shape) != p.shape:
            raise ValueError(f"{key}: expected shape {p.shape}, file has {tuple(value.shape)}")
        p.data[...] = value


def load_teacher_weights(teacher: Module, directory: str | Path) -> None:
    """Override a seeded teacher with an external weight directory."""
    arrays, _ = load_arrays(directory)
    load_module_state(teacher, arrays)
