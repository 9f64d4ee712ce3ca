"""Flat binary checkpoint archive.

Layout (all integers little-endian)::

    b"MELODICK"                   magic, 8 bytes
    u32 version                   currently 1
    u32 header_len
    header_len bytes              UTF-8 JSON: {"config_hash", "dtype", "meta", ...}
    u32 n_records
    n_records x record:
        u16 name_len, name bytes (UTF-8)
        u8 ndim, ndim x u32 extents
        prod(extents) floats      "<f4" (dtype "float32") or "<f8" (dtype "float64")

Records hold model parameters under their dotted names and optimizer slots
under ``opt.<slot>.<name>``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MELODICK"
VERSION = 1
_CODES = {"float32": "<f4", "float64": "<f8"}


def save(path: str | Path, records: dict[str, np.ndarray], header: dict) -> None:
    dtype = header.setdefault("dtype", "float32")
    code = _CODES[dtype]
    head = json.dumps(header, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(head)))
        fh.write(head)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records.items():
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=code).tobytes())
    tmp.replace(path)


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen))
        code = _CODES[header["dtype"]]
        width = np.dtype(code).itemsize
        (n,) = struct.unpack("<I", fh.read(4))
        records = {}
        for _ in range(n):
            (ln,) = struct.unpack("<H", fh.read(2))
            name = fh.read(ln).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            records[name] = np.frombuffer(fh.read(width * count), dtype=code).reshape(shape).copy()
    return records, header
