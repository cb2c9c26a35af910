"""Versioned text checkpoint format shared by all trainable models.

Layout (all lines UTF-8 text):

    EDGESLICE-CKPT-V1
    <one-line JSON metadata object>
    <array name> <dtype> <dim0> <dim1> ...
    <base64 of the array's C-order bytes>
    ... (one name/payload pair per array)

Readers must reject files whose first line is not the magic string.
"""

from __future__ import annotations

import base64
import json
import os

import numpy as np

MAGIC = "EDGESLICE-CKPT-V1"


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    """Write named float arrays plus a JSON metadata header atomically."""
    lines = [MAGIC, json.dumps(meta or {}, sort_keys=True)]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        # Header carries the original shape; 0-d stays 0-d on reload.
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"{name} {arr.dtype.name} {dims}".rstrip())
        payload = np.ascontiguousarray(arr).tobytes()
        lines.append(base64.b64encode(payload).decode("ascii"))
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_arrays(path):
    """Read a checkpoint; returns (arrays dict, metadata dict)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != MAGIC:
        raise ValueError(f"{path}: not an {MAGIC} checkpoint")
    meta = json.loads(lines[1])
    arrays = {}
    i = 2
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        header = lines[i].split()
        name, dtype, shape = header[0], header[1], tuple(int(d) for d in header[2:])
        raw = base64.b64decode(lines[i + 1])
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        i += 2
    return arrays, meta
