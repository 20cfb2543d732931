"""Checkpoint container and parameter averaging.

File layout::

    8 bytes   magic b"MPTCKPT1"
    4 bytes   little-endian uint32 header length H
    H bytes   UTF-8 JSON header: format_version, step, config, dtype,
              manifest = [{name, shape, offset, count}, ...]  (offset in bytes
              from the start of the payload)
    payload   little-endian IEEE-754 float64 scalars, row-major, in manifest order
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"MPTCKPT1"
FORMAT_VERSION = 1
_SCALAR = np.dtype("<f8")


@dataclass
class Checkpoint:
    step: int
    params: dict
    config: dict = field(default_factory=dict)

    def manifest(self):
        out, offset = [], 0
        for name, arr in self.params.items():
            count = int(np.asarray(arr).size)
            out.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "count": count})
            offset += count * _SCALAR.itemsize
        return out

    def save(self, path):
        path = Path(path)
        header = {
            "format_version": FORMAT_VERSION,
            "step": int(self.step),
            "config": self.config,
            "dtype": _SCALAR.str,
            "manifest": self.manifest(),
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for arr in self.params.values():
                fh.write(np.ascontiguousarray(arr, dtype=_SCALAR).tobytes())
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            raw = path.read_bytes()
        except FileNotFoundError:
            raise CheckpointError(f"checkpoint not found: {path}") from None
        if raw[:8] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        (hlen,) = struct.unpack("<I", raw[8:12])
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
        payload = memoryview(raw)[12 + hlen :]
        params = {}
        for entry in header["manifest"]:
            start = entry["offset"]
            stop = start + entry["count"] * _SCALAR.itemsize
            if stop > len(payload):
                raise CheckpointError(f"{path}: payload truncated in parameter {entry['name']}")
            arr = np.frombuffer(payload[start:stop], dtype=_SCALAR).reshape(entry["shape"])
            params[entry["name"]] = arr.astype(np.float64)
        return cls(step=header["step"], params=params, config=header.get("config", {}))


def average_checkpoints(checkpoints):
    """Arithmetic mean of every parameter across ``checkpoints``; step is the latest one."""
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise CheckpointError("no checkpoints to average")
    ref = checkpoints[0]
    for ck in checkpoints[1:]:
        if set(ck.params) != set(ref.params):
            diff = sorted(set(ck.params) ^ set(ref.params))
            raise CheckpointError(f"checkpoint schemas differ at parameter {diff[0]}")
        for name, arr in ref.params.items():
            if np.shape(ck.params[name]) != np.shape(arr):
                raise CheckpointError(f"parameter {name}: shape {np.shape(ck.params[name])} != {np.shape(arr)}")
    k = len(checkpoints)
    params = {}
    for name in ref.params:
        total = np.zeros(np.shape(ref.params[name]), dtype=np.float64)
        for ck in checkpoints:
            total += ck.params[name]
        params[name] = total / k
    return Checkpoint(step=max(ck.step for ck in checkpoints), params=params, config=dict(ref.config))
