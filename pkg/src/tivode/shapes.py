"""Synthetic moving-shapes videos with templated captions.

Each shape follows a sine-parameterized path, so ground truth exists at any
``t`` in [0, 1] and every moving shape returns to its start at ``t = 1``.
Positions are the top-left corner of the glyph's bounding box, in pixels.
"""
from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, InputError
from .odesolve import TimeGrid

FORMAT_VERSION = 1
GLYPHS = ("square", "circle", "triangle", "cross")
SPLIT_STRIDE = 1_000_000
SPLITS = ("train", "test", "val")


class MotionPattern(str, enum.Enum):
    UP_THEN_DOWN = "up_then_down"
    LEFT_THEN_RIGHT = "left_then_right"
    DOWN_THEN_UP = "down_then_up"
    RIGHT_THEN_LEFT = "right_then_left"
    STATIC = "static"

    @property
    def words(self) -> str:
        if self is MotionPattern.STATIC:
            return "stays still"
        return "moves " + self.value.replace("_", " ")

    @property
    def axis(self):
        """(d_row, d_col) direction of the first half of the motion."""
        return {
            MotionPattern.UP_THEN_DOWN: (-1, 0),
            MotionPattern.DOWN_THEN_UP: (1, 0),
            MotionPattern.LEFT_THEN_RIGHT: (0, -1),
            MotionPattern.RIGHT_THEN_LEFT: (0, 1),
            MotionPattern.STATIC: (0, 0),
        }[self]


PATTERNS = tuple(MotionPattern)
CAPTION_WORDS = ("the", "and", "moves", "stays", "still", "then",
                 "up", "down", "left", "right") + GLYPHS


@dataclass(frozen=True)
class ShapeSpec:
    glyph: str
    size: float
    intensity: float
    row: float
    col: float
    pattern: MotionPattern
    amplitude: float

    def extent(self):
        """Bounding box (rmin, rmax, cmin, cmax) swept over t in [0, 1]."""
        dr, dc = self.pattern.axis
        r0, r1 = sorted((self.row, self.row + dr * self.amplitude))
        c0, c1 = sorted((self.col, self.col + dc * self.amplitude))
        return r0, r1 + self.size, c0, c1 + self.size

    def validate(self, H: int, W: int) -> None:
        if self.glyph not in GLYPHS:
            raise InputError(f"unknown glyph {self.glyph!r}")
        if not 0 < self.intensity <= 1:
            raise InputError("intensity must be in (0, 1]")
        rmin, rmax, cmin, cmax = self.extent()
        if rmin < 0 or cmin < 0 or rmax > H or cmax > W:
            raise InputError(f"{self.glyph} leaves the {H}x{W} canvas during its motion")


def trajectory(spec: ShapeSpec, t: float) -> tuple[float, float]:
    """Top-left position of the glyph at time ``t``."""
    if not 0.0 <= t <= 1.0:
        raise InputError(f"t={t} outside [0, 1]")
    dr, dc = spec.pattern.axis
    s = spec.amplitude * np.sin(np.pi * t)
    return spec.row + dr * s, spec.col + dc * s


def _box_coverage(lo: float, hi: float, n: int) -> np.ndarray:
    """Length of overlap between [lo, hi] and each unit cell [i, i+1]."""
    edges = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(edges + 1, hi) - np.maximum(edges, lo), 0.0, 1.0)


def _rect(r0, r1, c0, c1, H, W):
    return np.outer(_box_coverage(r0, r1, H), _box_coverage(c0, c1, W))


def _coverage(glyph: str, row: float, col: float, size: float, H: int, W: int) -> np.ndarray:
    if glyph == "square":
        return _rect(row, row + size, col, col + size, H, W)
    if glyph == "cross":
        third = size / 3.0
        v = _rect(row, row + size, col + third, col + 2 * third, H, W)
        h = _rect(row + third, row + 2 * third, col, col + size, H, W)
        both = _rect(row + third, row + 2 * third, col + third, col + 2 * third, H, W)
        return v + h - both
    rr, cc = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    if glyph == "circle":
        radius = size / 2.0
        d = np.hypot(rr - (row + radius), cc - (col + radius))
        return np.clip(radius - d + 0.5, 0.0, 1.0)
    if glyph == "triangle":
        verts = np.array([(row + size, col), (row + size, col + size), (row, col + size / 2.0)])
        sd = np.full((H, W), -np.inf)
        for k in range(3):
            a, b = verts[k], verts[(k + 1) % 3]
            edge = b - a
            # outward normal for the counter-clockwise (row, col) ordering above
            normal = np.array([edge[1], -edge[0]]) / np.hypot(*edge)
            dist = (rr - a[0]) * normal[0] + (cc - a[1]) * normal[1]
            sd = np.maximum(sd, dist)
        return np.clip(0.5 - sd, 0.0, 1.0)
    raise InputError(f"unknown glyph {glyph!r}")


def quantize_intensity(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid used on disk, so files round-trip exactly."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def render_frame(specs: Sequence[ShapeSpec], t: float, H: int, W: int) -> np.ndarray:
    """Anti-aliased raster of all shapes at time ``t``; overlaps take the max."""
    img = np.zeros((H, W))
    for spec in specs:
        spec.validate(H, W)
        r, c = trajectory(spec, t)
        cov = _coverage(spec.glyph, r, c, spec.size, H, W)
        np.maximum(img, spec.intensity * cov, out=img)
    return quantize_intensity(img)


def caption_for(specs: Sequence[ShapeSpec]) -> str:
    return " and ".join(f"the {s.glyph} {s.pattern.words}" for s in specs)


def parse_caption(caption: str) -> list[tuple[str, MotionPattern]]:
    """Invert :func:`caption_for` back to (glyph, pattern) pairs."""
    out = []
    for clause in caption.strip().split(" and "):
        words = clause.split()
        if len(words) < 3 or words[0] != "the" or words[1] not in GLYPHS:
            raise InputError(f"caption clause {clause!r} does not follow the template")
        rest = " ".join(words[2:])
        for p in PATTERNS:
            if rest == p.words:
                out.append((words[1], p))
                break
        else:
            raise InputError(f"unknown motion phrase {rest!r}")
    return out


@dataclass
class VideoSample:
    frames: np.ndarray  # (T, H, W) in [0, 1]
    times: TimeGrid
    caption: str
    seed: int
    specs: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if len(self.frames) != len(self.times):
            raise InputError("frame count does not match time grid length")

    def __eq__(self, other):
        if not isinstance(other, VideoSample):
            return NotImplemented
        return (self.seed == other.seed and self.caption == other.caption
                and self.times.times == other.times.times
                and self.frames.shape == other.frames.shape
                and bool(np.array_equal(self.frames, other.frames)))

    def to_bytes(self) -> bytes:
        cap = self.caption.encode("utf-8")
        header = struct.pack("<QHH", self.seed, len(self.frames), len(cap))
        pix = np.round(self.frames * 255.0).astype(np.uint8)
        return header + cap + pix.tobytes()


def _draw_spec(rng: np.random.Generator, glyph: str, H: int, W: int) -> ShapeSpec:
    scale = min(H, W) / 32.0
    size = float(rng.integers(6, 9)) * scale
    intensity = float(rng.uniform(0.6, 1.0))
    pattern = PATTERNS[int(rng.integers(len(PATTERNS)))]
    amplitude = float(rng.uniform(5.0, 8.0)) * scale
    dr, dc = pattern.axis
    # admissible start range so the swept box stays inside the canvas
    rlo = max(0.0, -dr * amplitude)
    rhi = H - size - max(0.0, dr * amplitude)
    clo = max(0.0, -dc * amplitude)
    chi = W - size - max(0.0, dc * amplitude)
    row = float(rng.uniform(rlo, rhi))
    col = float(rng.uniform(clo, chi))
    return ShapeSpec(glyph, size, intensity, row, col, pattern, amplitude)


def _overlap(a: ShapeSpec, b: ShapeSpec) -> bool:
    return not (a.row + a.size <= b.row or b.row + b.size <= a.row
                or a.col + a.size <= b.col or b.col + b.size <= a.col)


def draw_specs(seed: int, n_shapes: int, H: int, W: int) -> tuple[ShapeSpec, ...]:
    if not 1 <= n_shapes <= len(GLYPHS):
        raise InputError(f"n_shapes must be in 1..{len(GLYPHS)}, got {n_shapes}")
    rng = np.random.default_rng(seed)
    glyphs = [GLYPHS[i] for i in rng.permutation(len(GLYPHS))[:n_shapes]]
    specs = []
    for g in glyphs:
        for _ in range(50):
            spec = _draw_spec(rng, g, H, W)
            if not any(_overlap(spec, s) for s in specs):
                break
        specs.append(spec)
    return tuple(specs)


def make_sample(seed: int, n_shapes: int = 1, T: int = 8, H: int = 32, W: int = 32) -> VideoSample:
    """Deterministic video for ``seed`` with uniform times i/(T-1)."""
    if T < 2:
        raise InputError("a video needs at least two frames")
    specs = draw_specs(seed, n_shapes, H, W)
    grid = TimeGrid.uniform(T)
    frames = np.stack([render_frame(specs, t, H, W) for t in grid])
    return VideoSample(frames, grid, caption_for(specs), seed, specs)


def split_seeds(split: str, count: int, base_seed: int = 0) -> list[int]:
    """Disjoint seed ranges per split."""
    if split not in SPLITS:
        raise InputError(f"unknown split {split!r}")
    if count > SPLIT_STRIDE:
        raise InputError("split too large")
    start = base_seed + SPLITS.index(split) * SPLIT_STRIDE
    return list(range(start, start + count))


def make_dataset(count: int, n_shapes: int = 1, T: int = 8, size: int = 32,
                 base_seed: int = 0, split: str = "train") -> list[VideoSample]:
    return [make_sample(s, n_shapes, T, size, size) for s in split_seeds(split, count, base_seed)]


# ---------------------------------------------------------------- on-disk format


def write_dataset(path, samples: Sequence[VideoSample], vocab: Sequence[str] = CAPTION_WORDS,
                  samples_per_shard: int = 100) -> dict:
    """Write ``manifest.txt`` plus ``shard-%04d.bin`` files; returns the manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if not samples:
        raise InputError("no samples to write")
    T, H, W = samples[0].frames.shape
    for s in samples:
        if s.frames.shape != (T, H, W):
            raise InputError("all samples in a dataset must share T, H, W")
    manifest = {
        "format_version": FORMAT_VERSION,
        "count": len(samples),
        "H": H,
        "W": W,
        "T": T,
        "samples_per_shard": samples_per_shard,
        "shards": (len(samples) + samples_per_shard - 1) // samples_per_shard,
        "vocab": " ".join(vocab),
    }
    for i in range(manifest["shards"]):
        chunk = samples[i * samples_per_shard:(i + 1) * samples_per_shard]
        blob = b"".join(s.to_bytes() for s in chunk)
        name = f"shard-{i:04d}.bin"
        (path / name).write_bytes(blob)
        manifest[f"{name}.crc32"] = f"{zlib.crc32(blob):08x}"
    text = "".join(f"{k}={v}\n" for k, v in manifest.items())
    (path / "manifest.txt").write_text(text)
    return manifest


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        lines = (path / "manifest.txt").read_text().splitlines()
    except FileNotFoundError as exc:
        raise FormatError(f"no manifest.txt in {path}") from exc
    out = {}
    for n, line in enumerate(lines):
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"manifest line {n + 1} is not key=value")
        k, v = line.split("=", 1)
        out[k] = v
    for key in ("format_version", "count", "H", "W", "T", "samples_per_shard", "shards"):
        if key not in out:
            raise FormatError(f"manifest lacks {key}")
        out[key] = int(out[key])
    if out["format_version"] != FORMAT_VERSION:
        raise FormatError(f"dataset format version {out['format_version']} != {FORMAT_VERSION}")
    return out


def _parse_shard(blob: bytes, T: int, H: int, W: int) -> list[VideoSample]:
    samples = []
    pos = 0
    grid = TimeGrid.uniform(T)
    hdr = struct.calcsize("<QHH")
    while pos < len(blob):
        if pos + hdr > len(blob):
            raise FormatError("truncated sample header", pos)
        seed, t_count, cap_len = struct.unpack_from("<QHH", blob, pos)
        if t_count != T:
            raise FormatError(f"sample has {t_count} frames, manifest says {T}", pos)
        pos += hdr
        if pos + cap_len > len(blob):
            raise FormatError("truncated caption", pos)
        try:
            caption = blob[pos:pos + cap_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("caption is not UTF-8", pos) from exc
        pos += cap_len
        n = T * H * W
        if pos + n > len(blob):
            raise FormatError("truncated frame data", pos)
        pix = np.frombuffer(blob, dtype=np.uint8, count=n, offset=pos).reshape(T, H, W)
        pos += n
        samples.append(VideoSample(pix.astype(np.float64) / 255.0, grid, caption, seed))
    return samples


def read_dataset(path) -> list[VideoSample]:
    path = Path(path)
    m = read_manifest(path)
    samples = []
    for i in range(m["shards"]):
        name = f"shard-{i:04d}.bin"
        try:
            blob = (path / name).read_bytes()
        except FileNotFoundError as exc:
            raise FormatError(f"missing shard {name}") from exc
        crc = m.get(f"{name}.crc32")
        if crc is not None and f"{zlib.crc32(blob):08x}" != crc:
            raise FormatError(f"{name} checksum mismatch", 0)
        try:
            samples.extend(_parse_shard(blob, m["T"], m["H"], m["W"]))
        except FormatError as exc:
            err = FormatError(f"{name}: {exc}")
            err.offset = exc.offset
            raise err from exc
    if len(samples) != m["count"]:
        raise FormatError(f"found {len(samples)} samples, manifest says {m['count']}")
    return samples
