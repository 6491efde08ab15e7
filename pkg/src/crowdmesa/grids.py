"""Raster containers, summed-area tables and the CGRID / PGM file formats.

Rasters are plain numpy arrays: ``(H, W)`` for single-channel grids and
``(H, W, C)`` for multi-channel ones (row-major, channel-interleaved, which is
exactly the CGRID byte layout). Pixel ``(x, y)`` covers the continuous square
``[x, x+1) x [y, y+1)``; its center sits at ``(x + 0.5, y + 0.5)``.
"""

from __future__ import annotations

import os
from typing import NamedTuple

import numpy as np

CGRID_MAGIC = "CGRID"
CGRID_VERSION = 1


class FormatError(ValueError):
    """Raised when a file does not follow one of the package's formats."""


class BoxRegion(NamedTuple):
    """Inclusive axis-aligned pixel rectangle."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0 + 1

    @property
    def height(self) -> int:
        return self.y1 - self.y0 + 1

    @property
    def area(self) -> int:
        return self.width * self.height

    def slices(self) -> tuple[slice, slice]:
        """Row/column slices selecting the box from an ``(H, W, ...)`` array."""
        return slice(self.y0, self.y1 + 1), slice(self.x0, self.x1 + 1)

    def check(self, width: int, height: int) -> None:
        if not (0 <= self.x0 <= self.x1 < width and 0 <= self.y0 <= self.y1 < height):
            raise ValueError(f"box {tuple(self)} outside {width}x{height} grid")


def make_box(x0: int, y0: int, x1: int, y1: int) -> BoxRegion:
    if x1 < x0 or y1 < y0:
        raise ValueError(f"empty box ({x0}, {y0}, {x1}, {y1})")
    return BoxRegion(int(x0), int(y0), int(x1), int(y1))


def full_box(width: int, height: int) -> BoxRegion:
    return BoxRegion(0, 0, width - 1, height - 1)


def as_grid(data, channels: int | None = None) -> np.ndarray:
    """Validate a raster and return it as a float array.

    float32 input is kept as is; anything else becomes float64, which is the
    working precision of every count and mass computation.
    """
    arr = np.asarray(data)
    if arr.dtype != np.float32:
        arr = arr.astype(np.float64)
    if arr.ndim not in (2, 3) or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"expected a nonempty (H, W) or (H, W, C) raster, got shape {arr.shape}")
    if arr.ndim == 3 and arr.shape[2] < 1:
        raise ValueError("raster needs at least one channel")
    if channels is not None and n_channels(arr) != channels:
        raise ValueError(f"expected {channels} channel(s), got {n_channels(arr)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("raster contains NaN or Inf")
    return arr


def n_channels(arr: np.ndarray) -> int:
    return 1 if arr.ndim == 2 else arr.shape[2]


class IntegralImage:
    """Summed-area table of a single-channel grid.

    ``table[j, i]`` holds the sum of source rows ``< j`` and columns ``< i``,
    accumulated in float64 regardless of the source precision.
    """

    def __init__(self, table: np.ndarray):
        self.table = table

    @property
    def width(self) -> int:
        return self.table.shape[1] - 1

    @property
    def height(self) -> int:
        return self.table.shape[0] - 1

    def sum(self, box: BoxRegion) -> float:
        box.check(self.width, self.height)
        t = self.table
        return float(
            t[box.y1 + 1, box.x1 + 1] - t[box.y0, box.x1 + 1] - t[box.y1 + 1, box.x0] + t[box.y0, box.x0]
        )


def integral_image(grid) -> IntegralImage:
    grid = as_grid(grid)
    if grid.ndim == 3:
        if grid.shape[2] != 1:
            raise ValueError("integral_image needs a single-channel grid")
        grid = grid[:, :, 0]
    h, w = grid.shape
    table = np.zeros((h + 1, w + 1), dtype=np.float64)
    np.cumsum(np.cumsum(grid, axis=0, dtype=np.float64), axis=1, out=table[1:, 1:])
    return IntegralImage(table)


def box_sum(sat: IntegralImage, box: BoxRegion) -> float:
    return sat.sum(box)


# --------------------------------------------------------------------------- CGRID


def write_cgrid(path: str | os.PathLike, grid) -> None:
    """Write a raster as CGRID v1 (values stored as little-endian float32)."""
    grid = as_grid(grid)
    h, w = grid.shape[:2]
    c = n_channels(grid)
    header = f"{CGRID_MAGIC} {CGRID_VERSION} {w} {h} {c}\n".encode("ascii")
    payload = np.ascontiguousarray(grid, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_cgrid(path: str | os.PathLike) -> np.ndarray:
    """Read a CGRID v1 file. Single-channel files come back as ``(H, W)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing CGRID header line")
    parts = raw[:nl].decode("ascii", errors="replace").split()
    if len(parts) != 5 or parts[0] != CGRID_MAGIC:
        raise FormatError(f"{path}: not a CGRID file")
    if parts[1] != str(CGRID_VERSION):
        raise FormatError(f"{path}: unsupported CGRID version {parts[1]} (expected {CGRID_VERSION})")
    try:
        w, h, c = (int(p) for p in parts[2:])
    except ValueError:
        raise FormatError(f"{path}: malformed CGRID dimensions") from None
    if w < 1 or h < 1 or c < 1:
        raise FormatError(f"{path}: nonpositive CGRID dimensions")
    body = raw[nl + 1:]
    expected = w * h * c * 4
    if len(body) != expected:
        raise FormatError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(h, w, c)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: CGRID contains NaN or Inf")
    return arr[:, :, 0] if c == 1 else arr


# --------------------------------------------------------------------------- PGM


def to_uint8(values: np.ndarray, nodata: float | None = None) -> np.ndarray:
    """Min-max scale the finite (non-NODATA) values to 0..255; NODATA maps to 0."""
    values = np.asarray(values, dtype=np.float64)
    valid = np.isfinite(values)
    if nodata is not None:
        valid &= values != nodata
    out = np.zeros(values.shape, dtype=np.uint8)
    if not valid.any():
        return out
    lo, hi = values[valid].min(), values[valid].max()
    if hi > lo:
        scaled = np.floor((values[valid] - lo) / (hi - lo) * 255.0 + 0.5)
        out[valid] = np.clip(scaled, 0, 255).astype(np.uint8)
    return out


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write an 8-bit binary (P5) PGM."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit P2 (ASCII) or P5 (binary) PGM as a uint8 array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens: list[bytes] = []
    pos = 0
    # header: magic, width, height, maxval; '#' comments allowed between tokens
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise FormatError(f"{path}: truncated PGM header")
        if raw[pos:pos + 1] == b"#":
            pos = raw.find(b"\n", pos)
            if pos < 0:
                raise FormatError(f"{path}: truncated PGM header")
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    magic = tokens[0]
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    if maxval > 255:
        raise FormatError(f"{path}: only 8-bit PGM supported")
    if magic == b"P5":
        data = raw[pos + 1:pos + 1 + w * h]
        if len(data) != w * h:
            raise FormatError(f"{path}: truncated PGM payload")
        return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()
    if magic == b"P2":
        vals = raw[pos:].split()
        if len(vals) < w * h:
            raise FormatError(f"{path}: truncated PGM payload")
        return np.array([int(v) for v in vals[: w * h]], dtype=np.uint8).reshape(h, w)
    raise FormatError(f"{path}: unsupported PGM magic {magic!r}")


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Load a frame as a single-channel float image in [0, 1].

    PGM files are divided by 255; CGRID frames are taken as already
    normalized. Multi-channel CGRIDs are reduced to gray by channel mean.
    """
    path = os.fspath(path)
    if path.lower().endswith(".pgm"):
        return read_pgm(path).astype(np.float64) / 255.0
    arr = read_cgrid(path).astype(np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return arr
