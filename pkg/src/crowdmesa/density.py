"""Ground-truth density rasterization, density estimation and counting."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .features import FeatureIndexMap
from .grids import BoxRegion, FormatError, as_grid, integral_image

DEFAULT_GT_SIGMA = 8.0
KERNEL_TRUNCATE = 3.0


@dataclass
class AnnotationSet:
    """Person positions of one frame, in continuous pixel coordinates."""

    frame: str
    points: np.ndarray  # (N, 2) columns x, y

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(pts)):
            raise ValueError("annotation coordinates must be finite")
        self.points = pts
        self.frame = str(self.frame)

    def __len__(self) -> int:
        return len(self.points)

    def check_bounds(self, width: int, height: int) -> None:
        x, y = self.points[:, 0], self.points[:, 1]
        bad = (x < 0) | (x > width) | (y < 0) | (y > height)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ValueError(
                f"frame {self.frame}: annotation {i} at ({x[i]:g}, {y[i]:g}) outside {width}x{height} image"
            )


def gaussian_splat(x: float, y: float, sigma: float, width: int, height: int):
    """Unit-mass truncated Gaussian evaluated at pixel centers.

    Returns ``(row_slice, col_slice, patch)`` so that callers can add
    ``patch`` into ``grid[row_slice, col_slice]``. Support is the disk of
    radius ``3 * sigma`` clipped to the image; mass is renormalized over that
    support.
    """
    r = KERNEL_TRUNCATE * sigma
    i0 = max(int(np.ceil(x - 0.5 - r)), 0)
    i1 = min(int(np.floor(x - 0.5 + r)), width - 1)
    j0 = max(int(np.ceil(y - 0.5 - r)), 0)
    j1 = min(int(np.floor(y - 0.5 + r)), height - 1)
    if i0 <= i1 and j0 <= j1:
        dx = np.arange(i0, i1 + 1) + 0.5 - x
        dy = np.arange(j0, j1 + 1) + 0.5 - y
        d2 = dy[:, None] ** 2 + dx[None, :] ** 2
        patch = np.where(d2 <= r * r, np.exp(-d2 / (2.0 * sigma * sigma)), 0.0)
        total = patch.sum()
        if total > 0:
            return slice(j0, j1 + 1), slice(i0, i1 + 1), patch / total
    # support misses every pixel center: all mass on the containing pixel
    i = min(max(int(np.floor(x)), 0), width - 1)
    j = min(max(int(np.floor(y)), 0), height - 1)
    return slice(j, j + 1), slice(i, i + 1), np.ones((1, 1))


def rasterize_ground_truth(ann: AnnotationSet, sigma: float, width: int, height: int) -> np.ndarray:
    """Sum of one unit-mass truncated Gaussian per annotation; sums to ``len(ann)``."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    ann.check_bounds(width, height)
    out = np.zeros((height, width), dtype=np.float64)
    for x, y in ann.points:
        rs, cs, patch = gaussian_splat(x, y, sigma, width, height)
        out[rs, cs] += patch
    return out


def estimate_density(feat: FeatureIndexMap, w) -> np.ndarray:
    """Per-pixel density: sum over channels of the weight of the active feature."""
    weights = np.asarray(getattr(w, "weights", w), dtype=np.float64)
    if weights.ndim != 1 or len(weights) != feat.n_features:
        raise ValueError(f"weight vector has {weights.size} entries, feature layout needs {feat.n_features}")
    return weights[feat.global_indices()].sum(axis=2)


def count_total(d) -> float:
    return float(np.sum(as_grid(d), dtype=np.float64))


def count_region(d, box: BoxRegion) -> float:
    return integral_image(d).sum(box)


# --------------------------------------------------------------------------- files


def read_annotations(path: str | os.PathLike) -> dict[str, AnnotationSet]:
    """Read a ``frame,x,y`` CSV into per-frame annotation sets (file order kept)."""
    frames: dict[str, list[tuple[float, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["frame", "x", "y"]:
            raise FormatError(f"{path}: annotation CSV must start with header 'frame,x,y'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                frames.setdefault(row[0].strip(), []).append((float(row[1]), float(row[2])))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric coordinate") from None
    return {f: AnnotationSet(f, np.array(p)) for f, p in frames.items()}


def write_annotations(path: str | os.PathLike, sets) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["frame", "x", "y"])
        for ann in sets:
            for x, y in ann.points:
                writer.writerow([ann.frame, repr(float(x)), repr(float(y))])
