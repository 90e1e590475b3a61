"""Checkpoint container: a JSON manifest followed by raw little-endian float32 payloads.

Layout::

    b"DAVIDCKP" | u32 version | u64 header length | header JSON (utf-8) | payloads

The header lists every array (name, shape, dtype, frozen flag, byte offset)
and carries free-form metadata. Output is byte-stable for identical inputs.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"DAVIDCKP"
VERSION = 1
STAGES = ("init", "F_t", "F_n", "F_nt")


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    frozen: frozenset[str] = frozenset()
    stage: str = "init"
    plan_hash: str = ""
    metrics: dict[str, Any] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown checkpoint stage {self.stage!r}")

    def to_bytes(self) -> bytes:
        entries, payload, offset = [], [], 0
        for name in sorted(self.arrays):
            arr = np.ascontiguousarray(self.arrays[name], dtype="<f4")
            raw = arr.tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                            "frozen": name in self.frozen, "offset": offset, "nbytes": len(raw)})
            payload.append(raw)
            offset += len(raw)
        header = {"arrays": entries, "stage": self.stage, "plan_hash": self.plan_hash,
                  "metrics": self.metrics, "meta": self.meta}
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + b"".join(payload)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != MAGIC:
            raise ValueError("not a checkpoint file")
        version, hlen = struct.unpack("<IQ", data[8:20])
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(data[20:20 + hlen].decode("utf-8"))
        base = 20 + hlen
        arrays, frozen = {}, set()
        for e in header["arrays"]:
            start = base + e["offset"]
            arr = np.frombuffer(data[start:start + e["nbytes"]], dtype="<f4").reshape(e["shape"])
            arrays[e["name"]] = arr.astype(np.float32)
            if e["frozen"]:
                frozen.add(e["name"])
        return cls(arrays, frozenset(frozen), header["stage"], header["plan_hash"], header["metrics"], header["meta"])

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def manifest(path: str | Path) -> list[dict]:
    data = Path(path).read_bytes()
    _, hlen = struct.unpack("<IQ", data[8:20])
    return json.loads(data[20:20 + hlen])["arrays"]
