"""Manifest + raw buffer storage for named arrays.

Layout of a store directory::

    manifest.json   {"format": ..., "meta": {...}, "entries": [{name, shape, dtype, offset, nbytes}]}
    buffer.bin      concatenated little-endian array bytes

Round trips are bit-exact.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

FORMAT = "handgcat-buffer-v1"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4", "uint8": "|u1", "bool": "|b1"}


def save_arrays(path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path / "buffer.bin", "wb") as fh:
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            dtype = arr.dtype.name
            if dtype not in _DTYPES:
                raise TypeError(f"{name}: unsupported dtype {dtype}")
            raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                            "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {"format": FORMAT, "meta": meta or {}, "entries": entries}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_arrays(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: unknown store format {manifest.get('format')!r}")
    buf = (path / "buffer.bin").read_bytes()
    arrays = {}
    for e in manifest["entries"]:
        raw = buf[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ValueError(f"{path}: truncated buffer at {e['name']}")
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(e["dtype"], copy=True)
    return arrays, manifest["meta"]
