"""Binary parameter container.

Layout (all integers little-endian)::

    b"MUSTCKPT"  u32 version
    repeated until EOF:
        u32 name_length, name (UTF-8), u32 rank, rank x u64 dims,
        prod(dims) x f64 values (row-major)

Metadata lives next to the container in ``<path>.json``.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"MUSTCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | os.PathLike, params: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, value in params.items():
            arr = np.asarray(value, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    params: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            name = blob[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", blob, pos)
            dims = struct.unpack_from(f"<{rank}Q", blob, pos + 4)
            pos += 4 + 8 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * count > len(blob):
                raise CheckpointError(f"{path}: truncated record {name!r}")
            params[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated container") from exc
    return params


def write_metadata(path: str | os.PathLike, meta: Mapping) -> str:
    side = f"{os.fspath(path)}.json"
    with open(side, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, ensure_ascii=False, indent=2, sort_keys=True)
        fh.write("\n")
    return side


def read_metadata(path: str | os.PathLike) -> dict:
    with open(f"{os.fspath(path)}.json", encoding="utf-8") as fh:
        return json.load(fh)
