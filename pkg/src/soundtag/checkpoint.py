"""Checkpoint files: ``manifest.json`` (tensor name, shape, byte offset) plus a
single ``tensors.bin`` blob of little-endian float64 values in row-major order."""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

FORMAT = "soundtag-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT, "version": VERSION, "dtype": "<f8", "tensors": entries, "meta": meta or {}}
    _atomic_write(path / BLOB, b"".join(chunks))
    _atomic_write(path / MANIFEST, json.dumps(manifest, indent=1, sort_keys=True).encode())
    return path


def read_manifest(path) -> dict:
    manifest = json.loads((Path(path) / MANIFEST).read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path} is not a checkpoint directory")
    return manifest


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    manifest = read_manifest(path)
    blob = (path / BLOB).read_bytes()
    out = {}
    for e in manifest["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise ValueError(f"checkpoint blob truncated at tensor '{e['name']}'")
        arr = np.frombuffer(blob[e["offset"]:end], dtype="<f8").astype(np.float64)
        out[e["name"]] = arr.reshape(e["shape"])
    return out


def _atomic_write(target: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
