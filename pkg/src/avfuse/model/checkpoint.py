"""Checkpoint container.

File layout: magic ``GFCK``, uint64 little-endian header length, UTF-8 JSON
header, then one GFT1 tensor blob per entry in name-sorted order. The header
carries the model config, a stage tag ("A" or "B"), the ordered tensor names,
and free-form metadata.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from ..autodiff.serialize import read_tensor, write_tensor

MAGIC = b"GFCK"


def checkpoint_bytes(tensors: Dict[str, np.ndarray], header: dict) -> bytes:
    names = sorted(tensors)
    head = dict(header)
    head["tensors"] = names
    raw = json.dumps(head, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(raw)))
    buf.write(raw)
    for name in names:
        write_tensor(buf, tensors[name])
    return buf.getvalue()


def save_checkpoint(path, tensors: Dict[str, np.ndarray], header: dict) -> str:
    """Write atomically; return the SHA-256 of the file bytes."""
    data = checkpoint_bytes(tensors, header)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {data[:4]!r})")
    (n,) = struct.unpack("<Q", data[4:12])
    header = json.loads(data[12:12 + n].decode("utf-8"))
    f = io.BytesIO(data[12 + n:])
    tensors = {name: read_tensor(f) for name in header["tensors"]}
    header["sha256"] = hashlib.sha256(data).hexdigest()
    return tensors, header


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
