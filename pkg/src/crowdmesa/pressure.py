"""Local velocity variance and the human-pressure map P = rho * Var(V)."""

from __future__ import annotations

import numpy as np

from .georef import NODATA, WorldGrid

DEFAULT_RADIUS_M = 1.0
DEFAULT_T_WINDOW = 5


def _disk_offsets(radius_m: float, cell: float) -> list[tuple[int, int]]:
    r = int(np.floor(radius_m / cell))
    return [
        (dr, dc)
        for dr in range(-r, r + 1)
        for dc in range(-r, r + 1)
        if (dr * dr + dc * dc) * cell * cell <= radius_m * radius_m + 1e-12
    ]


def _shifted(a: np.ndarray, dr: int, dc: int, fill) -> np.ndarray:
    """``out[r, c] = a[r + dr, c + dc]`` with ``fill`` outside."""
    h, w = a.shape[:2]
    out = np.full_like(a, fill)
    rs_dst = slice(max(-dr, 0), min(h - dr, h))
    cs_dst = slice(max(-dc, 0), min(w - dc, w))
    rs_src = slice(max(dr, 0), min(h + dr, h))
    cs_src = slice(max(dc, 0), min(w + dc, w))
    out[rs_dst, cs_dst] = a[rs_src, cs_src]
    return out


def velocity_variance(fields, radius_m: float = DEFAULT_RADIUS_M) -> WorldGrid:
    """Per cell: Var(v_east) + Var(v_north) over all valid samples of all
    fields whose cell centers lie within ``radius_m``.

    Population variance; cells with fewer than two samples get 0.
    """
    fields = list(fields)
    if not fields:
        raise ValueError("need at least one velocity field")
    if radius_m < 0:
        raise ValueError("radius must be nonnegative")
    spec = fields[0].spec
    for f in fields:
        if f.spec != spec:
            raise ValueError("velocity fields are on different world grids")
        if f.values.ndim != 3 or f.values.shape[2] != 2:
            raise ValueError("velocity fields need 2 channels (v_east, v_north)")
    offsets = _disk_offsets(radius_m, spec.cell_size)
    shape = (spec.height, spec.width)

    # center every sample on one reference velocity: the variance is unchanged
    # and a uniform field becomes exactly zero, so its variance is exactly zero
    samples = [f.values[f.values[:, :, 0] != f.nodata] for f in fields]
    stacked = np.concatenate(samples) if samples else np.zeros((0, 2))
    ref = stacked[0] if len(stacked) else np.zeros(2)
    centered = [np.where((f.values[:, :, 0] != f.nodata)[:, :, None], f.values - ref, 0.0) for f in fields]

    count = np.zeros(shape)
    sums = np.zeros(shape + (2,))
    for f, vals in zip(fields, centered):
        valid = f.values[:, :, 0] != f.nodata
        for dr, dc in offsets:
            count += _shifted(valid, dr, dc, False)
            sums += _shifted(vals, dr, dc, 0.0)
    mean = sums / np.maximum(count, 1)[:, :, None]

    sq = np.zeros(shape)
    for f, vals in zip(fields, centered):
        valid = f.values[:, :, 0] != f.nodata
        for dr, dc in offsets:
            ok = _shifted(valid, dr, dc, False)
            v = _shifted(vals, dr, dc, 0.0)
            sq += np.where(ok, ((v - mean) ** 2).sum(axis=2), 0.0)
    var = np.where(count >= 2, sq / np.maximum(count, 1), 0.0)
    return WorldGrid(spec, var, meta={"units": "(m/s)^2", "radius_m": radius_m, "n_fields": len(fields)})


def pressure_map(density: WorldGrid, variance: WorldGrid) -> WorldGrid:
    """Elementwise ``density * variance``; NODATA wherever either input is."""
    if density.spec != variance.spec:
        raise ValueError("density and variance are on different world grids")
    rho = density.values if density.values.ndim == 2 else density.values[:, :, 0]
    var = variance.values if variance.values.ndim == 2 else variance.values[:, :, 0]
    bad = (rho == density.nodata) | (var == variance.nodata)
    p = np.where(bad, NODATA, rho * var)
    return WorldGrid(density.spec, p, NODATA, meta={"units": "persons/m^2 * (m/s)^2"})


def max_pressure(p: WorldGrid) -> tuple[float, int, int, float, float]:
    """Largest pressure value and its cell ``(value, row, col, east, north)``.

    Ties resolve to the first cell in row-major order.
    """
    vals = np.where(p.valid, p.values, -np.inf)
    if not np.isfinite(vals).any():
        raise ValueError("pressure grid has no valid cells")
    idx = int(np.argmax(vals))
    r, c = divmod(idx, p.spec.width)
    ee, nn = p.spec.cell_centers()
    return float(vals[r, c]), r, c, float(ee[r, c]), float(nn[r, c])
