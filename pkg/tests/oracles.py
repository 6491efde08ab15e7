"""Slow, obviously-correct reference implementations used by the tests.

Nothing here imports the package under test.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def all_boxes(h: int, w: int):
    """Every inclusive box as (x0, y0, x1, y1), in lexicographic (y0, x0, y1, x1) order."""
    for y0, x0, y1, x1 in itertools.product(range(h), range(w), range(h), range(w)):
        if y1 >= y0 and x1 >= x0:
            yield x0, y0, x1, y1


def box_sum_loop(grid, box) -> float:
    x0, y0, x1, y1 = box
    total = 0.0
    for y in range(y0, y1 + 1):
        for x in range(x0, x1 + 1):
            total += float(grid[y][x])
    return total


def brute_max_subarray(grid):
    """O(W^2 H^2) enumeration; the first box in lexicographic order wins ties."""
    g = np.asarray(grid, dtype=np.float64)
    h, w = g.shape
    best_box, best = None, -math.inf
    for box in all_boxes(h, w):
        x0, y0, x1, y1 = box
        s = float(g[y0:y1 + 1, x0:x1 + 1].sum())
        if s > best:
            best, best_box = s, box
    return best_box, best


def brute_mesa(f1, f2) -> float:
    d = np.asarray(f1, dtype=np.float64) - np.asarray(f2, dtype=np.float64)
    h, w = d.shape
    best = 0.0
    for x0, y0, x1, y1 in all_boxes(h, w):
        best = max(best, abs(float(d[y0:y1 + 1, x0:x1 + 1].sum())))
    return best


def prefix_table(grid):
    """(H+1) x (W+1) table with table[j][i] = sum of rows < j, cols < i, by double loop."""
    g = np.asarray(grid, dtype=np.float64)
    h, w = g.shape
    t = [[0.0] * (w + 1) for _ in range(h + 1)]
    for j in range(1, h + 1):
        for i in range(1, w + 1):
            t[j][i] = sum(float(g[y][x]) for y in range(j) for x in range(i))
    return np.array(t)


def tally(global_indices, n_features, box=None):
    """Histogram of global feature indices over a box, by explicit loops."""
    gi = np.asarray(global_indices)
    h, w, c = gi.shape
    x0, y0, x1, y1 = box if box is not None else (0, 0, w - 1, h - 1)
    counts = [0] * n_features
    for y in range(y0, y1 + 1):
        for x in range(x0, x1 + 1):
            for ch in range(c):
                counts[int(gi[y, x, ch])] += 1
    return np.array(counts, dtype=np.float64)


def gaussian_kernel_loop(x, y, sigma, width, height):
    """Unit-mass 3-sigma-disk Gaussian at pixel centers, clipped to the image."""
    r2 = (3.0 * sigma) ** 2
    vals = {}
    for j in range(height):
        for i in range(width):
            d2 = (i + 0.5 - x) ** 2 + (j + 0.5 - y) ** 2
            if d2 <= r2:
                vals[(j, i)] = math.exp(-d2 / (2 * sigma * sigma))
    out = np.zeros((height, width))
    total = sum(vals.values())
    for (j, i), v in vals.items():
        out[j, i] = v / total
    return out


def ray_plane(center, rotation, focal, pp, terrain, u, v):
    """Intersection of the pixel ray with the plane z = terrain, solved as a 3x3 system."""
    d = np.asarray(rotation) @ np.array([(u - pp[0]) / focal, (v - pp[1]) / focal, 1.0])
    c = np.asarray(center, dtype=np.float64)
    t = (terrain - c[2]) / d[2]
    p = c + t * d
    return p[0], p[1]


def population_variance(samples) -> float:
    """Var(v_e) + Var(v_n) of a list of 2-vectors."""
    s = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    if len(s) < 2:
        return 0.0
    mean = [sum(v[k] for v in s) / len(s) for k in range(2)]
    return sum((v[k] - mean[k]) ** 2 for v in s for k in range(2)) / len(s)


def local_variance_loop(fields, nodata, radius_cells):
    """Per-cell disk variance over all fields, by explicit loops."""
    h, w = fields[0].shape[:2]
    out = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            samples = []
            for f in fields:
                for rr in range(h):
                    for cc in range(w):
                        if (rr - r) ** 2 + (cc - c) ** 2 <= radius_cells ** 2 + 1e-9 and f[rr, cc, 0] != nodata:
                            samples.append(f[rr, cc])
            out[r, c] = population_variance(samples)
    return out


def apply_homography(m, x, y):
    p = np.asarray(m, dtype=np.float64) @ np.array([x, y, 1.0])
    return p[0] / p[2], p[1] / p[2]
