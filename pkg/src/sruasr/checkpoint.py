"""Checkpoint directories: ``manifest.json`` plus one little-endian float64 blob.

The manifest lists every tensor as ``{"name", "shape"}`` in blob order.
Output is byte-stable: keys are sorted and no timestamps are written.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import DataError

MANIFEST = "manifest.json"
BLOB = "weights.bin"


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def save_checkpoint(directory, manifest: dict, tensors: dict[str, np.ndarray]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = [{"name": name, "shape": list(arr.shape)} for name, arr in tensors.items()]
    full = dict(manifest, blob=BLOB, tensors=entries)
    with open(directory / BLOB, "wb") as fh:
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    (directory / MANIFEST).write_text(dump_json(full), encoding="utf-8")
    return directory


def load_checkpoint(directory) -> tuple[dict, dict[str, np.ndarray]]:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text(encoding="utf-8"))
        raw = np.fromfile(directory / manifest.get("blob", BLOB), dtype="<f8")
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {directory}: {exc}") from exc
    tensors = {}
    offset = 0
    for entry in manifest.get("tensors", []):
        shape = tuple(entry["shape"])
        size = math.prod(shape)
        if offset + size > raw.size:
            raise DataError(f"checkpoint blob in {directory} is truncated at {entry['name']}")
        tensors[entry["name"]] = raw[offset : offset + size].astype(np.float64).reshape(shape)
        offset += size
    if offset != raw.size:
        raise DataError(f"checkpoint blob in {directory} has {raw.size - offset} trailing values")
    return manifest, tensors
