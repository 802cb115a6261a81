"""Binary PGM (P5) grayscale frames."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError


def to_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM frames are 2-D, got shape {img.shape}")
    pix = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    H, W = pix.shape
    return f"P5\n{W} {H}\n255\n".encode("ascii") + pix.tobytes()


def write(path, img: np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(img))


def _tokens(buf: bytes, n: int):
    """First ``n`` whitespace-separated header tokens (skipping # comments) and the payload offset."""
    out, pos = [], 0
    while len(out) < n:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise FormatError("truncated PGM header", pos)
        if buf[pos:pos + 1] == b"#":
            nl = buf.find(b"\n", pos)
            pos = len(buf) if nl < 0 else nl + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        out.append(buf[start:pos])
    return out, pos + 1  # exactly one whitespace byte before raster data


def from_bytes(buf: bytes) -> np.ndarray:
    """Decode a P5 image to floats in [0, 1]."""
    (magic, w, h, maxval), pos = _tokens(buf, 4)
    if magic != b"P5":
        raise FormatError(f"not a binary PGM (magic {magic!r})", 0)
    try:
        W, H, mx = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise FormatError("malformed PGM header", 0) from exc
    if not 0 < mx < 65536 or W <= 0 or H <= 0:
        raise FormatError("PGM header out of range", 0)
    dtype = np.uint8 if mx < 256 else np.dtype(">u2")
    need = W * H * np.dtype(dtype).itemsize
    if len(buf) - pos < need:
        raise FormatError(f"PGM raster truncated: need {need} bytes", pos)
    pix = np.frombuffer(buf, dtype=dtype, count=W * H, offset=pos).reshape(H, W)
    return pix.astype(np.float64) / mx


def read(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())
