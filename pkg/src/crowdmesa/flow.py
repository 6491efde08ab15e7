"""Duality-based TV-L1 optical flow and temporal flow averaging."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grids import as_grid

logger = logging.getLogger(__name__)

DEFAULT_GAP = 10  # frames between the two images of a flow pair
DEFAULT_AVG_WINDOW = 5

# residuals are measured in 8-bit gray levels so that the customary
# lambda = 0.15 keeps its usual meaning for [0, 1] inputs
_INTENSITY_SCALE = 255.0


@dataclass(frozen=True)
class FlowParams:
    lambda_: float = 0.15
    theta: float = 0.3
    tau: float = 0.25
    warps: int = 5
    iterations: int = 50
    scale: float = 0.5
    min_size: int = 16
    gap: int = DEFAULT_GAP
    avg_window: int = DEFAULT_AVG_WINDOW

    def __post_init__(self):
        if not 0 < self.tau <= 0.25:
            raise ValueError(f"tau must be in (0, 0.25] for a stable dual step, got {self.tau}")
        if not 0 < self.scale < 1:
            raise ValueError(f"pyramid scale must be in (0, 1), got {self.scale}")
        if self.gap < 1:
            raise ValueError("frame gap must be at least 1")
        if self.avg_window < 1:
            raise ValueError("averaging window must be at least 1")
        if self.lambda_ <= 0 or self.theta <= 0:
            raise ValueError("lambda and theta must be positive")
        if self.warps < 1 or self.iterations < 1 or self.min_size < 2:
            raise ValueError("warps, iterations must be >= 1 and min_size >= 2")


def to_gray(image) -> np.ndarray:
    img = as_grid(image)
    if img.ndim == 3:
        img = img.mean(axis=2)
    return np.asarray(img, dtype=np.float64)


def _check_normalized(img: np.ndarray, name: str) -> None:
    lo, hi = img.min(), img.max()
    if lo < -1e-6 or hi > 1 + 1e-6:
        raise ValueError(f"{name} intensities must lie in [0, 1], found [{lo:g}, {hi:g}]")


def _forward_grad(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:, :-1] = u[:, 1:] - u[:, :-1]
    gy[:-1, :] = u[1:, :] - u[:-1, :]
    return gx, gy


def _divergence(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    # negative adjoint of _forward_grad
    div = np.zeros_like(px)
    div[:, 0] = px[:, 0]
    div[:, 1:-1] = px[:, 1:-1] - px[:, :-2]
    div[:, -1] = -px[:, -2]
    div[0, :] += py[0, :]
    div[1:-1, :] += py[1:-1, :] - py[:-2, :]
    div[-1, :] -= py[-2, :]
    return div


def warp_bilinear(img: np.ndarray, flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``img`` at ``(x + u, y + v)``; returns (warped, inside-mask).

    Out-of-range samples are clamped to the edge and flagged False.
    """
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    x = xx + flow[:, :, 0]
    y = yy + flow[:, :, 1]
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    warped = ndimage.map_coordinates(img, [y, x], order=1, mode="nearest")
    return warped, inside


def _pyramid(img: np.ndarray, p: FlowParams) -> list[np.ndarray]:
    levels = [img]
    sigma = 0.6 * np.sqrt(1.0 / p.scale ** 2 - 1.0)
    while True:
        h, w = levels[-1].shape
        nh, nw = int(round(h * p.scale)), int(round(w * p.scale))
        if min(nh, nw) < p.min_size:
            break
        blurred = ndimage.gaussian_filter(levels[-1], sigma, mode="nearest")
        levels.append(_resize(blurred, nh, nw))
    return levels


def _resize(img: np.ndarray, nh: int, nw: int) -> np.ndarray:
    h, w = img.shape
    # sample positions aligned on pixel centers
    ys = (np.arange(nh) + 0.5) * (h / nh) - 0.5
    xs = (np.arange(nw) + 0.5) * (w / nw) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")


def _solve_level(i1, i2, flow, p: FlowParams, duals):
    lt = p.lambda_ * p.theta
    taut = p.tau / p.theta
    gy2, gx2 = np.gradient(i2)
    u = flow
    px1, py1, px2, py2 = duals
    for _ in range(p.warps):
        u0 = u.copy()
        i2w, inside = warp_bilinear(i2, u0)
        gxw, _ = warp_bilinear(gx2, u0)
        gyw, _ = warp_bilinear(gy2, u0)
        grad_sq = gxw * gxw + gyw * gyw
        rho_c = i2w - gxw * u0[:, :, 0] - gyw * u0[:, :, 1] - i1
        safe = np.where(grad_sq > 1e-12, grad_sq, 1.0)
        for _ in range(p.iterations):
            rho = rho_c + gxw * u[:, :, 0] + gyw * u[:, :, 1]
            # thresholding step on the data term
            lo = rho < -lt * grad_sq
            hi = rho > lt * grad_sq
            mid = ~(lo | hi) & (grad_sq > 1e-12)
            step = np.where(lo, lt, np.where(hi, -lt, np.where(mid, -rho / safe, 0.0)))
            step = np.where(inside, step, 0.0)
            v1 = u[:, :, 0] + step * gxw
            v2 = u[:, :, 1] + step * gyw
            # primal update, then dual ascent on the TV term
            u1 = v1 + p.theta * _divergence(px1, py1)
            u2 = v2 + p.theta * _divergence(px2, py2)
            gx, gy = _forward_grad(u1)
            norm = 1.0 + taut * np.hypot(gx, gy)
            px1 = (px1 + taut * gx) / norm
            py1 = (py1 + taut * gy) / norm
            gx, gy = _forward_grad(u2)
            norm = 1.0 + taut * np.hypot(gx, gy)
            px2 = (px2 + taut * gx) / norm
            py2 = (py2 + taut * gy) / norm
            u = np.stack([u1, u2], axis=2)
    return u, (px1, py1, px2, py2)


def tvl1_flow(i1, i2, p: FlowParams | None = None) -> np.ndarray:
    """Flow from ``i1`` to ``i2`` as an ``(H, W, 2)`` array of ``(dx, dy)`` pixels.

    ``i2(x + flow(x)) ~ i1(x)``. Inputs must be single-channel (or are
    averaged to gray) and normalized to ``[0, 1]``.
    """
    p = p or FlowParams()
    a = to_gray(i1)
    b = to_gray(i2)
    if a.shape != b.shape:
        raise ValueError(f"frame sizes differ: {a.shape} vs {b.shape}")
    _check_normalized(a, "first frame")
    _check_normalized(b, "second frame")
    pyr1 = _pyramid(a * _INTENSITY_SCALE, p)
    pyr2 = _pyramid(b * _INTENSITY_SCALE, p)

    h, w = pyr1[-1].shape
    flow = np.zeros((h, w, 2))
    duals = tuple(np.zeros((h, w)) for _ in range(4))
    for level in range(len(pyr1) - 1, -1, -1):
        l1, l2 = pyr1[level], pyr2[level]
        if flow.shape[:2] != l1.shape:
            nh, nw = l1.shape
            fy, fx = nh / flow.shape[0], nw / flow.shape[1]
            flow = np.stack(
                [_resize(flow[:, :, 0], nh, nw) * fx, _resize(flow[:, :, 1], nh, nw) * fy], axis=2
            )
            duals = tuple(_resize(d, nh, nw) for d in duals)
        flow, duals = _solve_level(l1, l2, flow, p, duals)
        logger.debug("level %d (%dx%d) done", level, l1.shape[1], l1.shape[0])
    return flow


def tvl1_energy(i1, i2, flow, p: FlowParams | None = None) -> float:
    """Total variation of both flow components plus lambda-weighted L1 residual."""
    p = p or FlowParams()
    a = to_gray(i1) * _INTENSITY_SCALE
    b = to_gray(i2) * _INTENSITY_SCALE
    tv = 0.0
    for c in range(2):
        gx, gy = _forward_grad(flow[:, :, c])
        tv += float(np.hypot(gx, gy).sum())
    warped, inside = warp_bilinear(b, flow)
    data = float(np.abs(warped - a)[inside].sum())
    return tv + p.lambda_ * data


def average_flows(fields) -> np.ndarray:
    """Per-pixel arithmetic mean of a list of flow fields."""
    fields = [np.asarray(as_grid(f, channels=2), dtype=np.float64) for f in fields]
    if not fields:
        raise ValueError("no flow fields to average")
    shape = fields[0].shape
    for f in fields[1:]:
        if f.shape != shape:
            raise ValueError(f"flow sizes differ: {f.shape} vs {shape}")
    return np.mean(fields, axis=0)


def sequence_flows(frames, p: FlowParams | None = None) -> list[np.ndarray]:
    """One flow per ``(t, t + gap)`` pair of an ordered frame list."""
    p = p or FlowParams()
    if len(frames) <= p.gap:
        raise ValueError(f"need more than gap={p.gap} frames, got {len(frames)}")
    return [tvl1_flow(frames[t], frames[t + p.gap], p) for t in range(len(frames) - p.gap)]


def windowed_averages(flows, window: int = DEFAULT_AVG_WINDOW) -> list[np.ndarray]:
    """Average of each run of ``window`` consecutive flows."""
    if window < 1:
        raise ValueError("window must be at least 1")
    if len(flows) < window:
        raise ValueError(f"need at least {window} flows to average, got {len(flows)}")
    return [average_flows(flows[t:t + window]) for t in range(len(flows) - window + 1)]


def endpoint_error(flow, gt) -> float:
    """Mean endpoint error between a flow field and a reference field."""
    flow = np.asarray(flow, dtype=np.float64)
    gt = np.broadcast_to(np.asarray(gt, dtype=np.float64), flow.shape)
    return float(np.hypot(*(flow - gt).transpose(2, 0, 1)).mean())
