"""Counting accuracy and temporal smoothness of per-frame counts."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CountErrors:
    mae: float  # persons
    mean_pct: float  # percent, over frames with gt > 0
    n_frames: int
    n_zero_gt: int  # frames left out of mean_pct


def count_errors(est, gt) -> CountErrors:
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape or est.ndim != 1:
        raise ValueError(f"need two equal-length 1-D count lists, got {est.shape} and {gt.shape}")
    if est.size == 0:
        raise ValueError("empty count lists")
    if np.any(gt < 0):
        raise ValueError("ground-truth counts must be nonnegative")
    err = np.abs(est - gt)
    pos = gt > 0
    pct = float(np.mean(err[pos] / gt[pos]) * 100.0) if pos.any() else float("nan")
    return CountErrors(float(err.mean()), pct, int(est.size), int((~pos).sum()))


def temporal_smoothness(counts) -> float:
    """Population std of successive differences; lower is smoother."""
    c = np.asarray(counts, dtype=np.float64)
    if c.ndim != 1 or c.size < 2:
        raise ValueError("need at least two counts")
    return float(np.std(np.diff(c)))


def write_count_report(path: str | os.PathLike, frames, gt, est) -> CountErrors:
    """CSV ``frame,gt_count,est_count,abs_err,pct_err`` plus ``#`` summary lines."""
    errs = count_errors(est, gt)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "gt_count", "est_count", "abs_err", "pct_err"])
        for f, g, e in zip(frames, gt, est):
            pct = abs(e - g) / g * 100.0 if g > 0 else float("nan")
            w.writerow([f, repr(float(g)), repr(float(e)), repr(abs(float(e) - float(g))), repr(pct)])
        fh.write(f"# mae {errs.mae!r}\n")
        fh.write(f"# mean_pct {errs.mean_pct!r}\n")
        fh.write(f"# frames {errs.n_frames}\n")
        fh.write(f"# zero_gt_frames {errs.n_zero_gt}\n")
        if len(est) >= 2:
            fh.write(f"# temporal_smoothness {temporal_smoothness(est)!r}\n")
    return errs
