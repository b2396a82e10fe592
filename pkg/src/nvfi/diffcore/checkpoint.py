"""``.nvck`` checkpoint files.

Layout: one line of UTF-8 JSON (the header, terminated by ``\\n``) followed by
the raw little-endian arrays in header order.  Offsets in the header are
relative to the first byte after the newline.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .params import ParamStore

MAGIC = "nvck"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params, meta=None, iteration=0, config=None):
    entries = []
    offset = 0
    blobs = []
    for name, arr in params.arrays.items():
        data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        blob = data.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.name,
            "group": params.groups[name],
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": MAGIC,
        "version": VERSION,
        "iteration": int(iteration),
        "config": config or {},
        "meta": meta or {},
        "entries": entries,
    }
    line = json.dumps(header, separators=(",", ":"), sort_keys=True)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(line.encode("utf-8"))
        f.write(b"\n")
        for blob in blobs:
            f.write(blob)
    tmp.replace(path)


def read_header(path):
    with open(path, "rb") as f:
        line = f.readline()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from None
    if header.get("format") != MAGIC:
        raise CheckpointError(f"{path}: not an nvck file")
    return header, len(line)


def load_checkpoint(path, dtype=None):
    """Return ``(params, header)``."""
    header, start = read_header(path)
    raw = Path(path).read_bytes()[start:]
    entries = header["entries"]
    dtypes = {np.dtype(e["dtype"]) for e in entries}
    store_dtype = dtype or (dtypes.pop() if len(dtypes) == 1 else np.float32)
    params = ParamStore(store_dtype)
    for e in entries:
        end = e["offset"] + e["nbytes"]
        if end > len(raw):
            raise CheckpointError(f"{path}: entry {e['name']!r} truncated at byte {start + len(raw)}")
        arr = np.frombuffer(raw[e["offset"]:end], dtype=np.dtype(e["dtype"]).newbyteorder("<"))
        params.add(e["name"], arr.reshape(e["shape"]), e["group"])
    return params, header
