"""Named-tensor container files.

Layout::

    b"TIVC" | u32 format version | u32 manifest length | manifest (UTF-8)
    | tensor 0 | tensor 1 | ...

The manifest is ``key=value`` lines of metadata followed by one
``tensor=<name> <d0>x<d1>...`` line per tensor, in payload order. Each tensor
uses :func:`tivode.tensor.tensor_to_bytes`.
"""
from __future__ import annotations

import hashlib
import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import tensor_from_bytes, tensor_to_bytes

MAGIC = b"TIVC"
FORMAT_VERSION = 1


def _shape_str(shape) -> str:
    return "x".join(str(d) for d in shape) if len(shape) else "scalar"


def dumps(tensors: dict, meta: dict | None = None) -> bytes:
    lines = []
    for k, v in (meta or {}).items():
        if "\n" in str(v) or "=" in k:
            raise ValueError(f"metadata entry {k!r} cannot be stored on one line")
        lines.append(f"{k}={v}")
    payload = []
    for name, arr in tensors.items():
        if " " in name or "\n" in name:
            raise ValueError(f"tensor name {name!r} contains whitespace")
        arr = np.asarray(arr, dtype=np.float64)
        lines.append(f"tensor={name} {_shape_str(arr.shape)}")
        payload.append(tensor_to_bytes(arr))
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    head = MAGIC + struct.pack("<II", FORMAT_VERSION, len(manifest))
    return head + manifest + b"".join(payload)


def loads(buf: bytes):
    """Parse a container; returns (OrderedDict name -> array, metadata dict)."""
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise FormatError("not a tivode checkpoint (bad magic)", 0)
    version, mlen = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"checkpoint format version {version} != {FORMAT_VERSION}", 4)
    if 12 + mlen > len(buf):
        raise FormatError("truncated manifest", 12)
    try:
        text = buf[12:12 + mlen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("manifest is not UTF-8", 12) from exc
    meta = {}
    entries = []
    for line in text.splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        if key == "tensor":
            name, _, shape = value.partition(" ")
            dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
            entries.append((name, dims))
        else:
            meta[key] = value
    tensors = OrderedDict()
    pos = 12 + mlen
    for name, dims in entries:
        arr, pos = tensor_from_bytes(buf, pos)
        if arr.shape != dims:
            raise FormatError(f"tensor {name} has shape {arr.shape}, manifest says {dims}", pos)
        tensors[name] = arr
    if pos != len(buf):
        raise FormatError("trailing bytes after last tensor", pos)
    return tensors, meta


def save(path, tensors: dict, meta: dict | None = None) -> str:
    """Write atomically; returns the sha256 of the file contents."""
    path = Path(path)
    blob = dumps(tensors, meta)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def load(path):
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"checkpoint {path} not found") from exc
    return loads(buf)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
