"""Versioned binary container of named float64 tensors.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
header, then each tensor's row-major float64 bytes in header order. The
header records the model kind, its dimension table, the token vocabulary
and its SHA-256, plus free-form run metadata. Writes are atomic
(temp file + rename) and deterministic for identical inputs.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import LoadError

MAGIC = b"FRCKPT1\n"

Array = np.ndarray


def vocab_sha256(tokens: list[str]) -> str:
    return hashlib.sha256("\n".join(tokens).encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    kind: str
    dims: dict
    vocab: list[str]
    tensors: dict[str, Array]
    meta: dict


def save_checkpoint(
    path: str | Path,
    kind: str,
    dims: dict,
    vocab: list[str],
    tensors: dict[str, Array],
    meta: dict | None = None,
) -> None:
    path = Path(path)
    records = []
    buffers = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        records.append({"name": name, "shape": list(arr.shape)})
        buffers.append(arr.tobytes())
    header = {
        "format_version": 1,
        "kind": kind,
        "dims": dims,
        "vocab": vocab,
        "vocab_sha256": vocab_sha256(vocab),
        "meta": meta or {},
        "tensors": records,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for buf in buffers:
            fh.write(buf)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise LoadError(f"{path}: not a checkpoint file (bad magic)")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise LoadError(f"{path}: corrupt checkpoint header: {exc}") from None
        if header.get("format_version") != 1:
            raise LoadError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
        vocab = list(header["vocab"])
        if vocab_sha256(vocab) != header["vocab_sha256"]:
            raise LoadError(f"{path}: vocabulary hash mismatch")
        tensors: dict[str, Array] = {}
        for rec in header["tensors"]:
            shape = tuple(int(s) for s in rec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise LoadError(f"{path}: truncated tensor {rec['name']!r}")
            tensors[rec["name"]] = np.frombuffer(buf, dtype=np.float64).reshape(shape).copy()
    return Checkpoint(
        kind=header["kind"],
        dims=header["dims"],
        vocab=vocab,
        tensors=tensors,
        meta=header.get("meta", {}),
    )
