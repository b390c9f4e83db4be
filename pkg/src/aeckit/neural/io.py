"""Weight file format.

Layout (all integers little-endian)::

    b"AECW"                 magic
    uint32                  format version (1)
    uint32                  header length in bytes
    header                  UTF-8 JSON: {"version", "config", "tensors": [
                                {"name", "shape", "offset", "nbytes"}, ...]}
    payload                 float32 little-endian tensor data; offsets are
                            relative to the payload start

Loading validates the header against the file size and, when a config is
given, every tensor shape against it.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelWeights

MAGIC = b"AECW"
FORMAT_VERSION = 1


class WeightFileError(ValueError):
    """Corrupt, truncated or mismatched weight file."""


def save_weights(w: ModelWeights, path) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in w.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"version": FORMAT_VERSION, "config": asdict(w.config), "tensors": entries},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header)
        for c in chunks:
            f.write(c)


def load_weights(path, config: ModelConfig | None = None) -> ModelWeights:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise WeightFileError(f"{path}: not a weight file")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise WeightFileError(f"{path}: unsupported format version {version}")
    if 12 + hlen > len(raw):
        raise WeightFileError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen].decode())
        file_cfg = ModelConfig(**header["config"])
        entries = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise WeightFileError(f"{path}: corrupt header ({exc})") from exc
    payload = raw[12 + hlen:]
    expected = sum(e["nbytes"] for e in entries)
    if len(payload) != expected:
        raise WeightFileError(f"{path}: payload is {len(payload)} bytes, header declares {expected}")
    tensors = {}
    for e in entries:
        shape = tuple(e["shape"])
        if e["nbytes"] != 4 * int(np.prod(shape)) or e["offset"] + e["nbytes"] > len(payload):
            raise WeightFileError(f"{path}: bad extent for {e['name']}")
        tensors[e["name"]] = np.frombuffer(payload, dtype="<f4", count=int(np.prod(shape)),
                                           offset=e["offset"]).reshape(shape).astype(np.float64)
    cfg = config or file_cfg
    if config is not None:
        want = config.shapes()
        for name, arr in tensors.items():
            if name in want and arr.shape != want[name]:
                raise WeightFileError(f"{path}: {name} has shape {arr.shape}, config expects {want[name]}")
    try:
        return ModelWeights(cfg, tensors)
    except ValueError as exc:
        raise WeightFileError(f"{path}: {exc}") from exc
