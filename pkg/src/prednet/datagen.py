"""Synthetic moving-digit videos over a static background of random shapes.

A single glyph travels across a canvas cluttered with overlapping
rectangles, circles and triangles.  Every frame carries the index of the
direction the glyph takes next; at the canvas border the offending velocity
component is reflected and the label follows.

Also home to the IDX glyph reader and the VSEQ sequence container.
"""

from __future__ import annotations

import csv
import gzip
import hashlib
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError

# (dx, dy) with y growing downwards: E, NE, N, NW, W, SW, S, SE
DIRECTIONS = ((1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1))
SHAPE_KINDS = ("rectangle", "circle", "triangle")

VSEQ_MAGIC = b"VSEQ"
VSEQ_VERSION = 1
VSEQ_HEADER = struct.Struct("<4sB5I")


@dataclass(frozen=True)
class SceneSpec:
    canvas: tuple[int, int] = (32, 32)
    num_shapes: int = 6
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    glyph_size: int = 10
    speed: int = 1
    seq_len: int = 20
    background_range: tuple[float, float] = (0.0, 0.6)
    glyph_range: tuple[float, float] = (0.85, 1.0)

    def __post_init__(self):
        h, w = self.canvas
        if self.glyph_size < 1 or self.glyph_size + 2 > min(h, w):
            raise ConfigError(f"glyph of size {self.glyph_size} does not fit a {h}x{w} canvas with margin")
        if self.num_shapes < 0 or self.speed < 0 or self.seq_len < 1:
            raise ConfigError("num_shapes and speed must be >= 0, seq_len >= 1")
        unknown = set(self.shape_kinds) - set(SHAPE_KINDS)
        if unknown or not self.shape_kinds:
            raise ConfigError(f"unknown shape kinds {sorted(unknown)}")
        for lo, hi in (self.background_range, self.glyph_range):
            if not 0.0 <= lo <= hi <= 1.0:
                raise ConfigError("intensity ranges must satisfy 0 <= lo <= hi <= 1")

    def digest(self) -> str:
        return hashlib.sha256(repr(sorted(asdict(self).items())).encode()).hexdigest()[:16]


@dataclass
class LabeledSequence:
    frames: np.ndarray  # [T, 1, H, W] float32 in [0, 1]
    labels: np.ndarray  # [T] uint8 direction indices
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.frames.ndim != 4 or len(self.labels) != len(self.frames):
            raise ContractError("frames must be [T, C, H, W] with one label per frame")

    @property
    def T(self) -> int:
        return len(self.frames)


def direction_vector(index: int, speed: int = 1) -> tuple[int, int]:
    if not 0 <= index < len(DIRECTIONS):
        raise ContractError(f"direction index must be in 0..7, got {index}")
    dx, dy = DIRECTIONS[index]
    return dx * speed, dy * speed


def direction_index(dx: int, dy: int) -> int:
    return DIRECTIONS.index((int(np.sign(dx)), int(np.sign(dy))))


# ------------------------------------------------------------------ raster


def _draw_shape(img: np.ndarray, kind: str, rng: np.random.Generator, value: float) -> None:
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "rectangle":
        rh, rw = rng.integers(3, h // 2 + 1), rng.integers(3, w // 2 + 1)
        y0, x0 = rng.integers(0, h - rh + 1), rng.integers(0, w - rw + 1)
        mask = (yy >= y0) & (yy < y0 + rh) & (xx >= x0) & (xx < x0 + rw)
    elif kind == "circle":
        r = rng.uniform(2.0, min(h, w) / 4)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        mask = (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r
    else:
        pts = rng.uniform(0, [w, h], size=(3, 2))
        px, py = xx + 0.5, yy + 0.5
        signs = []
        for (x1, y1), (x2, y2) in zip(pts, np.roll(pts, -1, axis=0)):
            signs.append((x2 - x1) * (py - y1) - (y2 - y1) * (px - x1))
        s = np.stack(signs)
        mask = (s >= 0).all(axis=0) | (s <= 0).all(axis=0)
    img[mask] = value


def gen_background(seed: int, spec: SceneSpec) -> np.ndarray:
    """Static [H, W] background; later shapes overdraw earlier ones."""
    rng = np.random.default_rng([int(seed), 0])
    lo, hi = spec.background_range
    img = np.full(spec.canvas, rng.uniform(lo, hi))
    for _ in range(spec.num_shapes):
        kind = spec.shape_kinds[rng.integers(len(spec.shape_kinds))]
        _draw_shape(img, kind, rng, rng.uniform(lo, hi))
    return img.astype(np.float32)


def position_bounds(spec: SceneSpec) -> tuple[tuple[int, int], tuple[int, int]]:
    """Inclusive (x, y) ranges for the glyph's top-left corner, keeping a
    one-pixel margin to the canvas border."""
    h, w = spec.canvas
    g = spec.glyph_size
    return (1, w - 1 - g), (1, h - 1 - g)


def advance(position: tuple[int, int], direction: int, spec: SceneSpec) -> tuple[tuple[int, int], int]:
    """One movement step.  A velocity component that would leave the allowed
    range is reflected first, so the returned direction is the one applied."""
    (lo_x, hi_x), (lo_y, hi_y) = position_bounds(spec)
    x, y = position
    ux, uy = DIRECTIONS[direction]
    if not lo_x <= x + ux * spec.speed <= hi_x:
        ux = -ux
    if not lo_y <= y + uy * spec.speed <= hi_y:
        uy = -uy
    x = min(max(x + ux * spec.speed, lo_x), hi_x)
    y = min(max(y + uy * spec.speed, lo_y), hi_y)
    return (x, y), DIRECTIONS.index((ux, uy))


def gen_sequence(seed: int, spec: SceneSpec, glyphs: np.ndarray) -> LabeledSequence:
    """Composite one moving glyph over the static background of ``seed``."""
    glyphs = np.asarray(glyphs)
    if len(glyphs) == 0:
        raise ContractError("glyph set is empty")
    g = spec.glyph_size
    if glyphs.shape[1:] != (g, g):
        raise ContractError(f"glyphs must be {g}x{g}, got {glyphs.shape[1:]}")
    rng = np.random.default_rng([int(seed), 1])
    background = gen_background(seed, spec)
    alpha = glyphs[rng.integers(len(glyphs))].astype(np.float32)
    ink = np.float32(rng.uniform(*spec.glyph_range))
    direction = int(rng.integers(8))
    h, w = spec.canvas
    (lo_x, hi_x), (lo_y, hi_y) = position_bounds(spec)
    x, y = int(rng.integers(lo_x, hi_x + 1)), int(rng.integers(lo_y, hi_y + 1))

    T = spec.seq_len
    frames = np.empty((T, 1, h, w), dtype=np.float32)
    labels = np.empty(T, dtype=np.uint8)
    for t in range(T):
        frame = background.copy()
        patch = frame[y : y + g, x : x + g]
        frame[y : y + g, x : x + g] = patch * (1 - alpha) + ink * alpha
        frames[t, 0] = frame
        if t == T - 1:
            labels[t] = labels[t - 1] if T > 1 else direction
            break
        (x, y), direction = advance((x, y), direction, spec)
        labels[t] = direction
    return LabeledSequence(frames, labels, {"seed": int(seed), "spec": spec.digest()})


def sequence_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(int(seed)).generate_state(n)] if n else []


def gen_dataset(n: int, seed: int, spec: SceneSpec, glyphs: np.ndarray) -> list[LabeledSequence]:
    return [gen_sequence(s, spec, glyphs) for s in sequence_seeds(seed, n)]


# ------------------------------------------------------------------ glyphs

_FONT = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


def resize_nearest(images: np.ndarray, size: int) -> np.ndarray:
    _, h, w = images.shape
    rows = np.arange(size) * h // size
    cols = np.arange(size) * w // size
    return images[:, rows][:, :, cols]


def builtin_glyphs(size: int = 10) -> np.ndarray:
    """Ten digit glyphs rendered from a 5x7 bitmap font, padded to 7x7."""
    bitmaps = np.zeros((10, 7, 7), dtype=np.float32)
    for digit, rows in _FONT.items():
        bitmaps[digit, :, 1:6] = [[float(ch) for ch in row] for row in rows]
    return resize_nearest(bitmaps, size)


def load_digits_idx(path, glyph_size: int = 10, fallback: bool = True) -> np.ndarray:
    """Read an IDX3 unsigned-byte image file into ``[N, glyph_size, glyph_size]``.

    A missing file yields :func:`builtin_glyphs` (with a warning) unless
    ``fallback`` is false.
    """
    path = Path(path) if path is not None else None
    if path is None or not path.exists():
        if not fallback:
            raise FileNotFoundError(path)
        warnings.warn(f"digit file {path} not found; using the built-in glyph set", stacklevel=2)
        return builtin_glyphs(glyph_size)
    raw = gzip.decompress(path.read_bytes()) if path.suffix == ".gz" else path.read_bytes()
    if len(raw) < 16:
        raise FormatError("IDX file shorter than its header")
    magic, n, h, w = struct.unpack(">4I", raw[:16])
    if magic != 0x00000803:
        raise FormatError(f"bad IDX magic 0x{magic:08x}, expected 0x00000803")
    if n == 0 or h == 0 or w == 0:
        raise FormatError("IDX file declares an empty extent")
    if len(raw) != 16 + n * h * w:
        raise FormatError(f"IDX payload is {len(raw) - 16} bytes, header implies {n * h * w}")
    images = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, h, w)
    return resize_nearest(images.astype(np.float32) / 255.0, glyph_size)


# ------------------------------------------------------------------ VSEQ


def write_vseq(sequences: list[LabeledSequence], path) -> None:
    """Write sequences sharing one shape to a VSEQ container."""
    if sequences:
        T, C, H, W = sequences[0].frames.shape
        for s in sequences:
            if s.frames.shape != (T, C, H, W):
                raise ContractError("all sequences in a container must share one shape")
    else:
        T = C = H = W = 0
    with open(path, "wb") as fh:
        fh.write(VSEQ_HEADER.pack(VSEQ_MAGIC, VSEQ_VERSION, len(sequences), T, C, H, W))
        for s in sequences:
            fh.write(s.frames.astype("<f4").tobytes())
            fh.write(s.labels.astype(np.uint8).tobytes())


def read_vseq(path) -> list[LabeledSequence]:
    raw = Path(path).read_bytes()
    if len(raw) < VSEQ_HEADER.size:
        raise FormatError("VSEQ file shorter than its header")
    magic, version, n, T, C, H, W = VSEQ_HEADER.unpack_from(raw)
    if magic != VSEQ_MAGIC:
        raise FormatError(f"bad VSEQ magic {magic!r}")
    if version != VSEQ_VERSION:
        raise FormatError(f"unsupported VSEQ version {version}")
    frame_bytes = 4 * T * C * H * W
    expected = VSEQ_HEADER.size + n * (frame_bytes + T)
    if len(raw) != expected:
        raise FormatError(f"VSEQ file has {len(raw)} bytes, header implies {expected}")
    out = []
    pos = VSEQ_HEADER.size
    for i in range(n):
        frames = np.frombuffer(raw, dtype="<f4", count=T * C * H * W, offset=pos).reshape(T, C, H, W)
        pos += frame_bytes
        labels = np.frombuffer(raw, dtype=np.uint8, count=T, offset=pos)
        pos += T
        out.append(LabeledSequence(frames.astype(np.float32), labels.copy(), {"index": i}))
    return out


def class_balance(sequences: list[LabeledSequence]) -> np.ndarray:
    counts = np.zeros(len(DIRECTIONS), dtype=np.int64)
    for s in sequences:
        counts += np.bincount(s.labels, minlength=len(DIRECTIONS))
    return counts


def write_class_balance_csv(sequences: list[LabeledSequence], path) -> None:
    counts = class_balance(sequences)
    total = max(int(counts.sum()), 1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "count", "fraction"])
        for label, count in enumerate(counts):
            writer.writerow([label, int(count), f"{count / total:.6f}"])
