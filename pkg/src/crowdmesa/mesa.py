"""Maximum subarray search and the MESA distance between density maps."""

from __future__ import annotations

import numpy as np
from numba import njit

from .grids import BoxRegion, as_grid


@njit(cache=True)
def _better(val, k0, k1, k2, k3, best, b0, b1, b2, b3):
    if val > best:
        return True
    if val < best:
        return False
    if k0 != b0:
        return k0 < b0
    if k1 != b1:
        return k1 < b1
    if k2 != b2:
        return k2 < b2
    return k3 < b3


@njit(cache=True, nogil=True)
def _kadane_2d(a, transposed):
    # Outer loop over row intervals of `a`, 1-D Kadane over its columns.
    # When `a` is the transpose of the caller's grid the candidate key is
    # remapped so ties still resolve on (y0, x0, y1, x1) of the original.
    n_rows, n_cols = a.shape
    best = -np.inf
    b0 = b1 = b2 = b3 = 0
    acc = np.empty(n_cols)
    for r0 in range(n_rows):
        acc[:] = 0.0
        for r1 in range(r0, n_rows):
            for c in range(n_cols):
                acc[c] += a[r1, c]
            prefix = 0.0
            min_prefix = 0.0
            min_idx = 0
            for c1 in range(n_cols):
                if c1 > 0 and prefix < min_prefix:
                    min_prefix = prefix
                    min_idx = c1
                prefix += acc[c1]
                val = prefix - min_prefix
                if transposed:
                    k0, k1, k2, k3 = min_idx, r0, c1, r1
                else:
                    k0, k1, k2, k3 = r0, min_idx, r1, c1
                if _better(val, k0, k1, k2, k3, best, b0, b1, b2, b3):
                    best = val
                    b0, b1, b2, b3 = k0, k1, k2, k3
    return best, b0, b1, b2, b3


def max_subarray(grid) -> tuple[BoxRegion, float]:
    """Return the nonempty box with the largest sum, and that sum.

    Runs in O(min(H, W)^2 * max(H, W)). Among boxes with equal sums the one
    with the lexicographically smallest ``(y0, x0, y1, x1)`` wins.
    """
    a = as_grid(grid, channels=1)
    if a.ndim == 3:
        a = a[:, :, 0]
    a = np.ascontiguousarray(a, dtype=np.float64)
    h, w = a.shape
    if w < h:
        val, y0, x0, y1, x1 = _kadane_2d(np.ascontiguousarray(a.T), True)
    else:
        val, y0, x0, y1, x1 = _kadane_2d(a, False)
    return BoxRegion(int(x0), int(y0), int(x1), int(y1)), float(val)


def signed_excess(est, gt) -> tuple[tuple[BoxRegion, float], tuple[BoxRegion, float]]:
    """Most over-estimating and most under-estimating boxes of ``est`` vs ``gt``.

    Returns ``((box_over, excess_over), (box_under, excess_under))`` where
    ``excess_over = max_B sum_B(est - gt)`` and vice versa.
    """
    est = as_grid(est, channels=1)
    gt = as_grid(gt, channels=1)
    if est.shape != gt.shape:
        raise ValueError(f"density shapes differ: {est.shape} vs {gt.shape}")
    diff = np.asarray(est, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    return max_subarray(diff), max_subarray(-diff)


def mesa_distance(f1, f2) -> float:
    """Maximum excess over subarrays: max over boxes of ``|sum_B f1 - sum_B f2|``."""
    (_, over), (_, under) = signed_excess(f1, f2)
    return max(over, under, 0.0)
