"""Versioned binary container for parameter and sample arrays.

Layout::

    MEMX-CONTAINER <version>\\n
    <one-line JSON header>\\n
    <raw little-endian array payload>

The header records each array's dtype, shape, byte offset and length, the
caller's metadata, and a SHA-256 of the payload.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"MEMX-CONTAINER"
VERSION = 1


class ContainerError(ValueError):
    """Raised for malformed, truncated or corrupted container files."""


def payload_checksum(arrays: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(_to_le(arrays[name]).tobytes())
    return h.hexdigest()


def _to_le(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype.kind == "f":
        a = a.astype("<f8", copy=False)
    elif a.dtype.kind in "iub":
        a = a.astype("<i8", copy=False)
    else:
        raise ContainerError(f"unsupported dtype {a.dtype}")
    return np.ascontiguousarray(a)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_container(path: str | os.PathLike, arrays: Mapping[str, np.ndarray],
                    meta: Mapping[str, Any] | None = None) -> str:
    """Write ``arrays`` plus ``meta`` to ``path``; return the payload checksum."""
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        a = _to_le(arrays[name])
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    checksum = hashlib.sha256(payload).hexdigest()
    header = {"version": VERSION, "meta": dict(meta or {}), "arrays": entries,
              "payload_bytes": offset, "sha256": checksum}
    line = json.dumps(header, sort_keys=True, separators=(",", ":"))
    blob = MAGIC + b" " + str(VERSION).encode() + b"\n" + line.encode() + b"\n" + payload
    atomic_write_bytes(path, blob)
    return checksum


def read_header(path: str | os.PathLike) -> dict:
    with open(path, "rb") as fh:
        first = fh.readline()
        second = fh.readline()
    return _parse_header(first, second, path)


def _parse_header(first: bytes, second: bytes, path) -> dict:
    parts = first.strip().split(b" ")
    if len(parts) != 2 or parts[0] != MAGIC:
        raise ContainerError(f"{path}: not a container file")
    if int(parts[1]) != VERSION:
        raise ContainerError(f"{path}: unsupported container version {parts[1].decode()}")
    try:
        return json.loads(second)
    except json.JSONDecodeError as exc:
        raise ContainerError(f"{path}: corrupt header") from exc


def read_container(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(meta, arrays)``; raise :class:`ContainerError` on checksum mismatch."""
    with open(path, "rb") as fh:
        first = fh.readline()
        second = fh.readline()
        payload = fh.read()
    header = _parse_header(first, second, path)
    if len(payload) != header["payload_bytes"]:
        raise ContainerError(f"{path}: truncated payload")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ContainerError(f"{path}: checksum mismatch")
    arrays = {}
    for e in header["arrays"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return header["meta"], arrays


def verify_container(path: str | os.PathLike) -> bool:
    try:
        read_container(path)
    except (OSError, ContainerError):
        return False
    return True
