"""Binary checkpoint container.

Layout::

    b"ADNC" | u32 version | u64 header length | UTF-8 JSON header | pad | payloads

The header maps tensor names to {shape, dtype: "f32", offset, nbytes}
(offsets relative to the payload section, which starts on a 64-byte
boundary; every payload is 64-byte aligned) and carries all non-tensor
state under "state" and the run configuration under "config".
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ADNC"
VERSION = 1
ALIGN = 64


class CheckpointFormatError(ValueError):
    """The file is not a readable checkpoint of a supported version."""


@dataclass
class Checkpoint:
    config: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)  # name -> float32 ndarray
    state: dict = field(default_factory=dict)
    version: int = VERSION


def _aligned(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically (temp file + rename)."""
    entries = {}
    offset = 0
    arrays = []
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        entries[name] = {"shape": list(arr.shape), "dtype": "f32", "offset": offset, "nbytes": arr.nbytes}
        arrays.append((offset, arr))
        offset = _aligned(offset + arr.nbytes)
    header = json.dumps(
        {"tensors": entries, "state": ckpt.state, "config": ckpt.config}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    prefix = MAGIC + struct.pack("<IQ", ckpt.version, len(header)) + header
    data_start = _aligned(len(prefix))

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(prefix)
        fh.write(b"\x00" * (data_start - len(prefix)))
        pos = 0
        for off, arr in arrays:
            fh.write(b"\x00" * (off - pos))
            fh.write(arr.tobytes())
            pos = off + arr.nbytes
        fh.write(b"\x00" * (_aligned(pos) - pos))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not a checkpoint")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    if 16 + hlen > len(raw):
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt header ({exc})") from None
    data_start = _aligned(16 + hlen)
    tensors = {}
    for name, meta in header.get("tensors", {}).items():
        if meta.get("dtype") != "f32":
            raise CheckpointFormatError(f"{path}: tensor {name} has unsupported dtype {meta.get('dtype')}")
        a = data_start + meta["offset"]
        b = a + meta["nbytes"]
        if b > len(raw) or meta["nbytes"] != 4 * int(np.prod(meta["shape"], dtype=np.int64)):
            raise CheckpointFormatError(f"{path}: tensor {name} is truncated or inconsistent")
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=meta["nbytes"] // 4, offset=a).reshape(meta["shape"]).copy()
    return Checkpoint(header.get("config", {}), tensors, header.get("state", {}), version)
