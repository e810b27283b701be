"""Byte-stable array container shared by episode datasets and checkpoints.

Layout (all integers little-endian)::

    magic      4 bytes   b"CTRL"
    kind       8 bytes   e.g. b"EPISODES" or b"CHECKPNT"
    version    uint32
    header_len uint64
    header     UTF-8 JSON, keys sorted, no whitespace:
               {"arrays": [{"name", "shape", "offset"}...], "meta": {...}}
    payload    concatenated float64 arrays, row-major, '<f8'

``offset`` counts bytes from the start of the payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CTRL"


def write_container(path, kind: bytes, version: int, meta: dict,
                    arrays: list[tuple[str, np.ndarray]]) -> None:
    if len(kind) != 8:
        raise ValueError("kind must be 8 bytes")
    entries, blobs, offset = [], [], 0
    for name, arr in arrays:
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "offset": offset, "shape": list(a.shape)})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC + kind + struct.pack("<IQ", version, len(header)))
            fh.write(header)
            for b in blobs:
                fh.write(b)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def read_container(path, kind: bytes) -> tuple[int, dict, dict[str, np.ndarray], list[str]]:
    """Return (version, meta, arrays by name, array names in file order)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC or raw[4:12] != kind:
        raise ValueError(f"{path}: not a {kind.decode()} container")
    version, hlen = struct.unpack("<IQ", raw[12:24])
    header = json.loads(raw[24:24 + hlen].decode("utf-8"))
    base = 24 + hlen
    arrays, order = {}, []
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        a = np.frombuffer(raw, dtype="<f8", count=n, offset=start).reshape(e["shape"])
        arrays[e["name"]] = a.astype(np.float64)
        order.append(e["name"])
    return version, header["meta"], arrays, order
