"""Flat binary container for named matrices.

Layout::

    [8s magic b"ULORAWT\\0"][u32 version][u32 dtype code]      16-byte header
    [u64 manifest length][manifest: UTF-8 JSON]
    [payload: raw little-endian scalars, tensors back to back]

The manifest holds ``{"tensors": [{"name", "rows", "cols", "offset"}, ...],
"meta": {...}}`` with offsets in bytes from the start of the payload.  One
dtype per container.  Vectors are stored as ``1 x n`` matrices.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Any, BinaryIO, Mapping

import numpy as np

MAGIC = b"ULORAWT\x00"
VERSION = 1
_HEADER = struct.Struct("<8sII")
_LEN = struct.Struct("<Q")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class ContainerError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    buf = io.BytesIO()
    dump(buf, tensors, meta)
    return buf.getvalue()


def dump(fh: BinaryIO, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    dtypes = {np.dtype(a.dtype).newbyteorder("<") for a in tensors.values()}
    if len(dtypes) > 1:
        raise ContainerError(f"mixed dtypes in one container: {sorted(map(str, dtypes))}")
    dtype = dtypes.pop() if dtypes else np.dtype("<f8")
    if dtype not in _CODES:
        raise ContainerError(f"unsupported dtype {dtype}")

    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2:
            raise ContainerError(f"{name}: only matrices and vectors can be stored")
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entries.append({"name": name, "rows": int(arr.shape[0]), "cols": int(arr.shape[1]), "offset": offset})
        blobs.append(raw)
        offset += len(raw)

    manifest = json.dumps({"tensors": entries, "meta": dict(meta or {})}, sort_keys=True).encode()
    fh.write(_HEADER.pack(MAGIC, VERSION, _CODES[dtype]))
    fh.write(_LEN.pack(len(manifest)))
    fh.write(manifest)
    for raw in blobs:
        fh.write(raw)


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(data) < _HEADER.size + _LEN.size:
        raise ContainerError("truncated container header")
    magic, version, code = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ContainerError("bad magic; not a weight container")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if code not in _DTYPES:
        raise ContainerError(f"unknown dtype code {code}")
    dtype = _DTYPES[code]
    (mlen,) = _LEN.unpack_from(data, _HEADER.size)
    start = _HEADER.size + _LEN.size
    try:
        manifest = json.loads(data[start : start + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt manifest: {exc}") from None
    payload = memoryview(data)[start + mlen :]

    tensors = {}
    for e in manifest["tensors"]:
        n = e["rows"] * e["cols"]
        lo, hi = e["offset"], e["offset"] + n * dtype.itemsize
        if hi > len(payload):
            raise ContainerError(f"{e['name']}: payload truncated")
        arr = np.frombuffer(payload[lo:hi], dtype=dtype).reshape(e["rows"], e["cols"])
        tensors[e["name"]] = arr.astype(dtype.newbyteorder("="), copy=True)
    return tensors, manifest.get("meta", {})


def save(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    with open(path, "wb") as fh:
        dump(fh, tensors, meta)


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_bytes())
