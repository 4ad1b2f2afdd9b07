"""Binary checkpoint container.

Layout::

    b"PLCK"            magic
    uint32 LE          format version (1)
    uint32 LE          header length in bytes
    header             UTF-8 JSON: architecture, seed, step, extra, entries
    payload            concatenated little-endian float32 arrays

Each header entry records ``name``, ``shape`` and byte ``offset`` into the
payload. Parameters round-trip through float32, so reloaded values equal the
saved ones to single precision.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from planloc.neural.layers import ParameterStore

MAGIC = b"PLCK"
VERSION = 1


def save_checkpoint(path, store, architecture, seed=0, step=0, extra=None):
    entries, chunks, offset = [], [], 0
    for name, t in store.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "trainable": bool(store.is_trainable(name))})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {"architecture": architecture, "seed": int(seed), "step": int(step),
              "extra": extra or {}, "entries": entries}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path, expect_architecture=None):
    """Return ``(store, header)``; raises ``ValueError`` on a malformed file."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    if expect_architecture is not None and header["architecture"] != expect_architecture:
        raise ValueError(f"{path}: architecture {header['architecture']!r}, "
                         f"expected {expect_architecture!r}")
    payload = memoryview(blob)[12 + hlen:]
    store = ParameterStore()
    for e in header["entries"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"])
        store.add(e["name"], arr.astype(np.float64), trainable=e.get("trainable", True))
    return store, header


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
