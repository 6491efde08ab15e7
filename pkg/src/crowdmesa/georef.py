"""Pixel-to-world mappings, mass-conserving density rectification, metric
velocities, and ESRI ASCII / GeoJSON export.

World coordinates are planar metric (easting, northing) in any UTM-like
projection; the EPSG code is carried as metadata only. Terrain is a
horizontal plane at the mean terrain height.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .grids import FormatError, as_grid

logger = logging.getLogger(__name__)

DEFAULT_EPSG = 32633  # WGS84 / UTM zone 33N
DEFAULT_CELL_SIZE = 0.25
DEFAULT_SIGMA_W = 2.0
NODATA = -9999.0


class NoIntersectionError(ValueError):
    """A pixel ray never meets the terrain plane (or maps to infinity)."""


# --------------------------------------------------------------------------- mappings


@dataclass(frozen=True)
class Homography:
    """Plane-to-plane map from homogeneous pixel coords to (easting, northing)."""

    matrix: np.ndarray
    rms: float = 0.0

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise ValueError("homography must be a finite 3x3 matrix")
        if abs(m[2, 2]) < 1e-15:
            raise ValueError("homography has h33 = 0 and cannot be normalized")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise ValueError("homography is singular")
        object.__setattr__(self, "matrix", m)

    def to_world(self, u, v):
        """Vectorized pixel -> world. Returns ``(east, north, valid)``."""
        return _apply_h(self.matrix, u, v)

    def to_pixel(self, east, north):
        return _apply_h(np.linalg.inv(self.matrix), east, north)


def _apply_h(m, x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    hx = m[0, 0] * x + m[0, 1] * y + m[0, 2]
    hy = m[1, 0] * x + m[1, 1] * y + m[1, 2]
    hw = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    valid = np.abs(hw) > 1e-12 * (np.abs(hx) + np.abs(hy) + 1.0)
    safe = np.where(valid, hw, 1.0)
    return hx / safe, hy / safe, valid


def rotation_opk(omega: float, phi: float, kappa: float) -> np.ndarray:
    """Camera-to-world rotation for omega-phi-kappa angles (radians).

    Camera axes: x right, y down (image rows), z along the viewing ray.
    World axes: east, north, up. All-zero angles give a nadir view with image
    rows running north to south.
    """
    co, so = np.cos(omega), np.sin(omega)
    cp, sp = np.cos(phi), np.sin(phi)
    ck, sk = np.cos(kappa), np.sin(kappa)
    rx = np.array([[1, 0, 0], [0, co, -so], [0, so, co]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[ck, -sk, 0], [sk, ck, 0], [0, 0, 1]])
    return rx @ ry @ rz @ np.diag([1.0, -1.0, -1.0])


@dataclass(frozen=True)
class CameraPose:
    center: tuple[float, float, float]  # easting, northing, height (m)
    angles: tuple[float, float, float]  # omega, phi, kappa (rad)
    focal: float  # px
    principal_point: tuple[float, float]  # px, continuous coords
    terrain_height: float = 0.0

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError("focal length must be positive")
        if not self.center[2] > self.terrain_height:
            raise ValueError("camera must be above the terrain plane")

    @property
    def rotation(self) -> np.ndarray:
        return rotation_opk(*self.angles)

    def to_world(self, u, v):
        """Intersect pixel rays with the terrain plane. Returns ``(east, north, valid)``."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        cx, cy = self.principal_point
        r = self.rotation
        dc = ((u - cx) / self.focal, (v - cy) / self.focal, 1.0)
        dx = r[0, 0] * dc[0] + r[0, 1] * dc[1] + r[0, 2]
        dy = r[1, 0] * dc[0] + r[1, 1] * dc[1] + r[1, 2]
        dz = r[2, 0] * dc[0] + r[2, 1] * dc[1] + r[2, 2]
        valid = dz < -1e-12
        t = np.where(valid, (self.terrain_height - self.center[2]) / np.where(valid, dz, -1.0), 0.0)
        return self.center[0] + t * dx, self.center[1] + t * dy, valid

    def to_pixel(self, east, north):
        east = np.asarray(east, dtype=np.float64)
        north = np.asarray(north, dtype=np.float64)
        rt = self.rotation.T
        d = (east - self.center[0], north - self.center[1], self.terrain_height - self.center[2])
        xc = rt[0, 0] * d[0] + rt[0, 1] * d[1] + rt[0, 2] * d[2]
        yc = rt[1, 0] * d[0] + rt[1, 1] * d[1] + rt[1, 2] * d[2]
        zc = rt[2, 0] * d[0] + rt[2, 1] * d[1] + rt[2, 2] * d[2]
        valid = zc > 1e-12
        zs = np.where(valid, zc, 1.0)
        cx, cy = self.principal_point
        return self.focal * xc / zs + cx, self.focal * yc / zs + cy, valid


def pixel_to_world(mapping, pixel) -> tuple[float, float]:
    """Map one continuous pixel coordinate ``(u, v)`` to ``(easting, northing)``."""
    e, n, ok = mapping.to_world(float(pixel[0]), float(pixel[1]))
    if not bool(ok):
        raise NoIntersectionError(f"pixel ({pixel[0]:g}, {pixel[1]:g}) does not reach the terrain plane")
    return float(e), float(n)


def world_to_pixel(mapping, point) -> tuple[float, float]:
    u, v, ok = mapping.to_pixel(float(point[0]), float(point[1]))
    if not bool(ok):
        raise NoIntersectionError(f"world point ({point[0]:g}, {point[1]:g}) is not visible")
    return float(u), float(v)


def _normalizer(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.hypot(*(pts - c).T).mean()
    if d <= 0:
        raise ValueError("degenerate configuration: all points coincide")
    s = np.sqrt(2.0) / d
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def fit_homography(pixels, world) -> Homography:
    """Normalized DLT from >= 4 pixel<->world correspondences.

    The RMS reprojection residual (world units) is stored on the result.
    """
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    wd = np.asarray(world, dtype=np.float64).reshape(-1, 2)
    if len(px) != len(wd):
        raise ValueError("pixel and world point counts differ")
    if len(px) < 4:
        raise ValueError(f"need at least 4 correspondences, got {len(px)}")
    if len(np.unique(px, axis=0)) < len(px):
        raise ValueError("degenerate configuration: duplicated pixel point")
    if len(px) == 4:
        for i in range(4):
            a, b, c = (px[j] for j in range(4) if j != i)
            area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
            scale = max(np.ptp(px[:, 0]), np.ptp(px[:, 1]), 1e-300) ** 2
            if abs(area) <= 1e-12 * scale:
                raise ValueError("degenerate configuration: three collinear pixel points")
    tp, tw = _normalizer(px), _normalizer(wd)
    p = (tp @ np.column_stack([px, np.ones(len(px))]).T).T
    q = (tw @ np.column_stack([wd, np.ones(len(wd))]).T).T
    rows = []
    for (x, y, _), (bx, by, _) in zip(p, q):
        rows.append([-x, -y, -1, 0, 0, 0, x * bx, y * bx, bx])
        rows.append([0, 0, 0, -x, -y, -1, x * by, y * by, by])
    _, s, vt = np.linalg.svd(np.array(rows))
    if len(s) >= 8 and s[7] <= 1e-10 * s[0]:
        raise ValueError("degenerate configuration: correspondences do not fix a homography")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(tw) @ hn @ tp
    h = Homography(h)
    e, n, _ = h.to_world(px[:, 0], px[:, 1])
    rms = float(np.sqrt(np.mean((e - wd[:, 0]) ** 2 + (n - wd[:, 1]) ** 2)))
    return Homography(h.matrix, rms=rms)


# --------------------------------------------------------------------------- mapping files


def write_mapping(path: str | os.PathLike, mapping) -> None:
    if isinstance(mapping, Homography):
        body = "HOMOG 1\n" + " ".join(repr(float(x)) for x in mapping.matrix.ravel()) + "\n"
    else:
        vals = (*mapping.center, *mapping.angles, mapping.focal, *mapping.principal_point, mapping.terrain_height)
        body = "POSE 1\n" + " ".join(repr(float(x)) for x in vals) + "\n"
    Path(path).write_text(body, encoding="ascii")


def read_mapping(path: str | os.PathLike):
    tokens = Path(path).read_text(encoding="ascii").split()
    if len(tokens) < 2 or tokens[0] not in ("HOMOG", "POSE"):
        raise FormatError(f"{path}: mapping file must start with 'HOMOG 1' or 'POSE 1'")
    if tokens[1] != "1":
        raise FormatError(f"{path}: unsupported mapping version {tokens[1]}")
    try:
        vals = [float(t) for t in tokens[2:]]
    except ValueError:
        raise FormatError(f"{path}: non-numeric mapping value") from None
    try:
        if tokens[0] == "HOMOG":
            if len(vals) != 9:
                raise FormatError(f"{path}: HOMOG needs 9 values, found {len(vals)}")
            return Homography(np.array(vals).reshape(3, 3))
        if len(vals) != 10:
            raise FormatError(f"{path}: POSE needs 10 values, found {len(vals)}")
        return CameraPose(tuple(vals[0:3]), tuple(vals[3:6]), vals[6], tuple(vals[7:9]), vals[9])
    except FormatError:
        raise
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


# --------------------------------------------------------------------------- world grids


@dataclass(frozen=True)
class GridSpec:
    """North-up world raster; ``origin`` is the outer corner of cell (0, 0), its north-west corner."""

    origin_e: float
    origin_n: float
    cell_size: float
    width: int
    height: int
    epsg: int = DEFAULT_EPSG

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell size must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("world grid must have at least one cell")

    @classmethod
    def covering(cls, east, north, cell_size=DEFAULT_CELL_SIZE, pad_cells=0, epsg=DEFAULT_EPSG) -> "GridSpec":
        """Smallest cell-aligned grid containing all points, plus ``pad_cells`` on every side."""
        east = np.asarray(east, dtype=np.float64)
        north = np.asarray(north, dtype=np.float64)
        if east.size == 0:
            raise ValueError("empty footprint")
        e0 = np.floor(east.min() / cell_size) * cell_size - pad_cells * cell_size
        n0 = np.ceil(north.max() / cell_size) * cell_size + pad_cells * cell_size
        w = int(np.floor((east.max() - e0) / cell_size)) + 1 + pad_cells
        h = int(np.floor((n0 - north.min()) / cell_size)) + 1 + pad_cells
        return cls(float(e0), float(n0), float(cell_size), w, h, epsg)

    def cell_of(self, east, north):
        """Integer ``(row, col, inside)`` of the cells containing the points."""
        col = np.floor((np.asarray(east) - self.origin_e) / self.cell_size).astype(np.int64)
        row = np.floor((self.origin_n - np.asarray(north)) / self.cell_size).astype(np.int64)
        inside = (col >= 0) & (col < self.width) & (row >= 0) & (row < self.height)
        return row, col, inside

    def cell_centers(self):
        e = self.origin_e + (np.arange(self.width) + 0.5) * self.cell_size
        n = self.origin_n - (np.arange(self.height) + 0.5) * self.cell_size
        return np.meshgrid(e, n)


@dataclass
class WorldGrid:
    spec: GridSpec
    values: np.ndarray  # (H, W) or (H, W, C); NODATA marks empty cells
    nodata: float = NODATA
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape[:2] != (self.spec.height, self.spec.width):
            raise ValueError(f"values {self.values.shape[:2]} do not match grid {self.spec.height}x{self.spec.width}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("world grid values must be finite")

    @property
    def valid(self) -> np.ndarray:
        v = self.values if self.values.ndim == 2 else self.values[:, :, 0]
        return v != self.nodata

    def same_grid(self, other: "WorldGrid") -> bool:
        return self.spec == other.spec


def gaussian_smooth(values: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur truncated at 3 sigma with zero padding."""
    if sigma <= 0:
        return values.copy()
    return ndimage.gaussian_filter(values, sigma, mode="constant", cval=0.0, truncate=3.0)


def _pixel_centers(height: int, width: int):
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    return xx + 0.5, yy + 0.5


def rectify_density(density, mapping, spec: GridSpec, sigma_w: float = DEFAULT_SIGMA_W) -> WorldGrid:
    """Splat each pixel's mass into the world cell hit by its center, then smooth.

    Smoothing is rescaled so that the grid total equals the in-footprint mass
    exactly. ``meta`` reports the mass and pixel count that fell outside the
    grid or missed the terrain.
    """
    d = as_grid(density, channels=1)
    d = np.asarray(d[:, :, 0] if d.ndim == 3 else d, dtype=np.float64)
    h, w = d.shape
    u, v = _pixel_centers(h, w)
    e, n, ok = mapping.to_world(u, v)
    row, col, inside = spec.cell_of(e, n)
    hit = ok & inside
    if not hit.any():
        raise ValueError("no image pixel projects into the world grid (empty footprint)")
    flat = row[hit] * spec.width + col[hit]
    splat = np.bincount(flat, weights=d[hit], minlength=spec.width * spec.height).reshape(spec.height, spec.width)
    mass = float(splat.sum())
    out = gaussian_smooth(splat, sigma_w)
    np.maximum(out, 0.0, out=out)
    total = out.sum()
    if total > 0:
        out *= mass / total
    meta = {
        "image_mass": float(d.sum()),
        "grid_mass": mass,
        "outside_mass": float(d[~hit].sum()),
        "outside_pixels": int((~hit).sum()),
        "no_intersection_pixels": int((~ok).sum()),
    }
    if meta["outside_pixels"]:
        logger.info("%d pixels (mass %.4g) fell outside the world grid", meta["outside_pixels"], meta["outside_mass"])
    return WorldGrid(spec, out, meta=meta)


def frame_interval(gap: int, frame_rate: float) -> float:
    """Seconds between the two frames of a flow pair."""
    if gap < 1 or not frame_rate > 0:
        raise ValueError("gap must be >= 1 and frame rate positive")
    return gap / frame_rate


def rectify_motion(flow, mapping_t, mapping_t2, dt: float, spec: GridSpec) -> WorldGrid:
    """Metric velocity (m/s) per world cell from an image flow field.

    Each pixel's start point is mapped with ``mapping_t`` and its flow target
    with ``mapping_t2``; camera motion between the frames therefore cancels.
    Cells average the contributing pixels; empty cells hold NODATA.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    f = np.asarray(as_grid(flow, channels=2), dtype=np.float64)
    h, w = f.shape[:2]
    u, v = _pixel_centers(h, w)
    e1, n1, ok1 = mapping_t.to_world(u, v)
    e2, n2, ok2 = mapping_t2.to_world(u + f[:, :, 0], v + f[:, :, 1])
    row, col, inside = spec.cell_of(e1, n1)
    use = ok1 & ok2 & inside
    size = spec.width * spec.height
    flat = row[use] * spec.width + col[use]
    cnt = np.bincount(flat, minlength=size)
    ve = np.bincount(flat, weights=((e2 - e1) / dt)[use], minlength=size)
    vn = np.bincount(flat, weights=((n2 - n1) / dt)[use], minlength=size)
    has = cnt > 0
    out = np.full((size, 2), NODATA)
    out[has, 0] = ve[has] / cnt[has]
    out[has, 1] = vn[has] / cnt[has]
    meta = {
        "skipped_no_intersection": int((~(ok1 & ok2)).sum()),
        "outside_pixels": int((ok1 & ok2 & ~inside).sum()),
        "dt": dt,
    }
    return WorldGrid(spec, out.reshape(spec.height, spec.width, 2), meta=meta)


def density_per_m2(grid: WorldGrid) -> WorldGrid:
    """Convert persons per cell to persons per square meter."""
    vals = grid.values / grid.spec.cell_size ** 2
    vals = np.where(grid.values == grid.nodata, grid.nodata, vals)
    return WorldGrid(grid.spec, vals, grid.nodata, dict(grid.meta, units="persons/m^2"))


# --------------------------------------------------------------------------- export


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def export_world_grid(wg: WorldGrid, path: str | os.PathLike, fmt: str = "esri_ascii") -> list[Path]:
    """Write ``wg`` as ESRI ASCII grid(s) with an EPSG sidecar, or GeoJSON points.

    Multi-channel grids become one ``.asc`` per channel (``<stem>_<c>.asc``).
    Returns the written paths.
    """
    path = Path(path)
    if fmt == "esri_ascii":
        vals = wg.values if wg.values.ndim == 3 else wg.values[:, :, None]
        targets = [path] if vals.shape[2] == 1 else [
            path.with_name(f"{path.stem}_{c}{path.suffix}") for c in range(vals.shape[2])
        ]
        written = []
        s = wg.spec
        for c, target in enumerate(targets):
            lines = [
                f"ncols {s.width}",
                f"nrows {s.height}",
                f"xllcorner {_fmt(s.origin_e)}",
                f"yllcorner {_fmt(s.origin_n - s.height * s.cell_size)}",
                f"cellsize {_fmt(s.cell_size)}",
                f"NODATA_value {_fmt(wg.nodata)}",
            ]
            lines += [" ".join(_fmt(x) for x in row) for row in vals[:, :, c]]
            target.write_text("\n".join(lines) + "\n", encoding="ascii")
            target.with_suffix(".prj").write_text(f"EPSG:{s.epsg}\n", encoding="ascii")
            written += [target, target.with_suffix(".prj")]
        return written
    if fmt == "geojson_points":
        ee, nn = wg.spec.cell_centers()
        feats = []
        valid = wg.valid
        for r, c in zip(*np.nonzero(valid)):
            val = wg.values[r, c]
            props = {"row": int(r), "col": int(c)}
            if np.ndim(val):
                props["values"] = [float(x) for x in val]
            else:
                props["value"] = float(val)
            feats.append({
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [float(ee[r, c]), float(nn[r, c])]},
                "properties": props,
            })
        doc = {
            "type": "FeatureCollection",
            "crs": {"type": "name", "properties": {"name": f"urn:ogc:def:crs:EPSG::{wg.spec.epsg}"}},
            "features": feats,
        }
        path.write_text(json.dumps(doc), encoding="utf-8")
        return [path]
    raise ValueError(f"unknown export format {fmt!r}; expected 'esri_ascii' or 'geojson_points'")


def import_esri_ascii(path: str | os.PathLike) -> WorldGrid:
    path = Path(path)
    lines = path.read_text(encoding="ascii").splitlines()
    head = {}
    for line in lines[:6]:
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"{path}: malformed ESRI header line {line!r}")
        head[parts[0].lower()] = parts[1]
    try:
        w, h = int(head["ncols"]), int(head["nrows"])
        cs = float(head["cellsize"])
        xll, yll = float(head["xllcorner"]), float(head["yllcorner"])
        nodata = float(head.get("nodata_value", NODATA))
    except (KeyError, ValueError):
        raise FormatError(f"{path}: incomplete ESRI ASCII header") from None
    rows = [line.split() for line in lines[6:] if line.strip()]
    if len(rows) != h or any(len(r) != w for r in rows):
        raise FormatError(f"{path}: expected {h} rows of {w} values")
    vals = np.array([[float(x) for x in r] for r in rows])
    epsg = DEFAULT_EPSG
    prj = path.with_suffix(".prj")
    if prj.exists():
        text = prj.read_text(encoding="ascii").strip()
        if text.upper().startswith("EPSG:"):
            epsg = int(text.split(":", 1)[1])
    spec = GridSpec(xll, yll + h * cs, cs, w, h, epsg)
    return WorldGrid(spec, vals, nodata)
