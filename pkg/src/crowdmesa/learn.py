"""Cutting-plane learning of nonnegative feature weights under the MESA loss.

The learner minimizes::

    R(w) + lambda_fit * sum_i D_MESA(gt_i, est_i(w)),   w >= 0

with ``R(w) = lambda1 * sum(w)`` (L1) or ``R(w) = 0.5 * w.w`` (Tikhonov).
``D_MESA`` is a maximum over exponentially many boxes, so the loss is built
up one box at a time: each outer iteration solves a restricted convex program
over the stored boxes and then asks :func:`crowdmesa.mesa.max_subarray` for
the most violated box of every training frame.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .density import estimate_density
from .features import FeatureIndexMap
from .grids import BoxRegion, FormatError, as_grid, full_box, integral_image
from .mesa import signed_excess

logger = logging.getLogger(__name__)

REGULARIZERS = ("l1", "tik")
DEFAULT_LAMBDA_FIT = 100.0
DEFAULT_LAMBDA1 = 0.1
DEFAULT_EPS_CUT = 0.1
DEFAULT_MAX_OUTER = 100

_REG_TAGS = {"l1": "L1", "tik": "TIK"}


@dataclass
class WeightVector:
    """Learned nonnegative weight per global feature index."""

    weights: np.ndarray
    vocab_sizes: tuple[int, ...]
    reg: str = "l1"
    lambda_fit: float = DEFAULT_LAMBDA_FIT
    lambda1: float = DEFAULT_LAMBDA1

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.vocab_sizes = tuple(int(k) for k in self.vocab_sizes)
        if self.reg not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.reg!r}; expected one of {REGULARIZERS}")
        if self.weights.ndim != 1 or len(self.weights) != sum(self.vocab_sizes):
            raise ValueError(
                f"{self.weights.size} weights do not match vocabulary layout {self.vocab_sizes}"
            )
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite and nonnegative")

    @property
    def n_features(self) -> int:
        return len(self.weights)

    def check_layout(self, feat: FeatureIndexMap) -> None:
        if feat.vocab_sizes != self.vocab_sizes:
            raise ValueError(
                f"model vocabulary layout {self.vocab_sizes} does not match feature map {feat.vocab_sizes}"
            )


@dataclass
class TrainingInstance:
    features: FeatureIndexMap
    gt: np.ndarray
    frame: str = ""

    def __post_init__(self):
        gt = as_grid(self.gt, channels=1)
        gt = np.asarray(gt[:, :, 0] if gt.ndim == 3 else gt, dtype=np.float64)
        self.gt = gt
        if gt.shape != (self.features.height, self.features.width):
            raise ValueError(
                f"frame {self.frame}: GT {gt.shape[:2]} vs features "
                f"{(self.features.height, self.features.width)}"
            )
        if np.any(gt < 0):
            raise ValueError(f"frame {self.frame}: GT density has negative values")


@dataclass(frozen=True)
class BoxConstraint:
    instance: int
    box: BoxRegion
    counts: np.ndarray  # per global feature, pixels of the box carrying it
    target: float  # GT mass inside the box


@dataclass
class LearnDiagnostics:
    objectives: list[float] = field(default_factory=list)  # incumbent true objective
    iterate_objectives: list[float] = field(default_factory=list)  # objective of each new iterate
    inner_objectives: list[float] = field(default_factory=list)
    n_constraints: list[int] = field(default_factory=list)
    max_violation: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    final_max_violation: float = float("nan")
    slacks: np.ndarray | None = None
    mesa: np.ndarray | None = None
    seconds: float = 0.0

    def summary(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "objective": self.objectives[-1] if self.objectives else float("nan"),
            "n_constraints": self.n_constraints[-1] if self.n_constraints else 0,
            "final_max_violation": self.final_max_violation,
            "seconds": self.seconds,
        }


def box_feature_counts(feat: FeatureIndexMap, box: BoxRegion, gidx: np.ndarray | None = None) -> np.ndarray:
    """Histogram of global feature indices inside ``box``.

    ``w @ box_feature_counts(feat, B)`` equals the estimated count in ``B``.
    """
    box.check(feat.width, feat.height)
    if gidx is None:
        gidx = feat.global_indices()
    rs, cs = box.slices()
    return np.bincount(gidx[rs, cs].ravel(), minlength=feat.n_features).astype(np.float64)


def regularizer(w: np.ndarray, reg: str, lambda1: float) -> float:
    if reg == "l1":
        return float(lambda1 * np.sum(w))
    return float(0.5 * np.dot(w, w))


# --------------------------------------------------------------------------- inner solvers


def _solve_exact(A, t, inst, n_inst, reg, lambda_fit, lambda1):
    """Restricted program solved to optimality (LP for L1, QP for Tikhonov)."""
    m, n = A.shape
    if not np.any(t):
        # zero targets: w = 0 meets every constraint with zero slack and R(0) = 0
        return np.zeros(n), np.zeros(n_inst), 0.0
    # scale each box row by its pixel count; the feasible set is unchanged
    # because the slack column is scaled along with it
    scale = 1.0 / np.maximum(A.sum(1), 1.0)
    As = A * scale[:, None]
    ts = t * scale
    S = np.zeros((m, n_inst))
    S[np.arange(m), inst] = scale

    if reg == "l1":
        from scipy.optimize import linprog
        from scipy.sparse import csr_matrix, hstack, vstack

        c = np.concatenate([np.full(n, lambda1), np.full(n_inst, lambda_fit)])
        As_ = csr_matrix(As)
        S_ = csr_matrix(S)
        A_ub = vstack([hstack([As_, -S_]), hstack([-As_, -S_])]).tocsr()
        b_ub = np.concatenate([ts, -ts])
        res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=(0, None), method="highs")
        if res.status != 0:
            raise RuntimeError(f"inner LP failed: {res.message}")
        x = res.x
        return np.maximum(x[:n], 0.0), np.maximum(x[n:], 0.0), float(res.fun)

    from cvxopt import matrix, solvers

    # work in units of the largest per-pixel target; unscaled, the solver
    # stalls on this problem's conditioning and stops short of optimal
    sig = max(float(np.abs(ts).max()), 1e-12)
    N = n + n_inst
    P = np.zeros((N, N))
    P[np.arange(n), np.arange(n)] = sig * sig
    q = np.concatenate([np.zeros(n), np.full(n_inst, lambda_fit * sig)])
    G = np.vstack([np.hstack([As, -S]), np.hstack([-As, -S]), -np.eye(N)])
    h = np.concatenate([ts / sig, -ts / sig, np.zeros(N)])
    res = solvers.qp(matrix(P), matrix(q), matrix(G), matrix(h),
                     options={"show_progress": False, "maxiters": 200})
    if res["x"] is None or res["status"] not in ("optimal", "unknown"):
        raise RuntimeError(f"inner QP failed: {res['status']}")
    x = np.asarray(res["x"]).ravel() * sig
    w = np.maximum(x[:n], 0.0)
    xi = np.maximum(x[n:], 0.0)
    return w, xi, float(0.5 * w @ w + lambda_fit * xi.sum())


def _solve_subgradient(A, t, inst, n_inst, reg, lambda_fit, lambda1, w0, step=None, decay=0.05,
                       max_iter=20000, patience=50, rtol=1e-7):
    """Projected subgradient on R(w) + lambda_fit * sum_i max_{B in C_i} |A_B w - t_B|.

    Normalized steps ``step / (1 + k * decay)``; stops when the best
    objective has not improved by more than ``rtol`` (relative) for
    ``patience`` consecutive iterations.
    """
    m, n = A.shape
    w = np.maximum(np.asarray(w0, dtype=np.float64), 0.0)
    if step is None:
        # a count-matching scale: weights that would reproduce the mean target density
        step = max(float(np.max(t / np.maximum(A.sum(1), 1.0))), 1e-6)
    groups = [np.flatnonzero(inst == i) for i in range(n_inst)]

    def evaluate(w):
        r = A @ w - t
        xi = np.zeros(n_inst)
        arg = np.zeros(n_inst, dtype=np.int64)
        for i, g in enumerate(groups):
            if len(g):
                j = int(np.argmax(np.abs(r[g])))
                arg[i] = g[j]
                xi[i] = abs(r[g[j]])
        return regularizer(w, reg, lambda1) + lambda_fit * xi.sum(), r, xi, arg

    best_obj, r, xi, arg = evaluate(w)
    best_w, best_xi = w.copy(), xi.copy()
    stall = 0
    for k in range(max_iter):
        g = lambda1 * np.ones(n) if reg == "l1" else w.copy()
        for i in range(n_inst):
            if len(groups[i]):
                j = arg[i]
                g += lambda_fit * np.sign(r[j]) * A[j]
        norm = np.linalg.norm(g)
        if norm == 0:
            break
        w = np.maximum(w - step / (1.0 + k * decay) * g / norm, 0.0)
        obj, r, xi, arg = evaluate(w)
        if obj < best_obj - rtol * abs(best_obj):
            stall = 0
        else:
            stall += 1
        if obj < best_obj:
            best_obj, best_w, best_xi = obj, w.copy(), xi.copy()
        if stall >= patience:
            break
    return best_w, best_xi, best_obj


# --------------------------------------------------------------------------- outer loop


class _Frame:
    """Per-instance caches used during training."""

    def __init__(self, inst: TrainingInstance):
        self.feat = inst.features
        self.gidx = inst.features.global_indices()
        self.gt = np.asarray(inst.gt, dtype=np.float64)
        self.sat = integral_image(self.gt)
        self.frame = inst.frame

    def constraint(self, i: int, box: BoxRegion) -> BoxConstraint:
        return BoxConstraint(i, box, box_feature_counts(self.feat, box, self.gidx), self.sat.sum(box))


def _search(frame: _Frame, w: np.ndarray):
    est = w[frame.gidx].sum(axis=2)
    return signed_excess(est, frame.gt)


def learn_weights(
    train,
    reg: str = "l1",
    lambda_fit: float = DEFAULT_LAMBDA_FIT,
    lambda1: float = DEFAULT_LAMBDA1,
    eps_cut: float = DEFAULT_EPS_CUT,
    max_outer: int = DEFAULT_MAX_OUTER,
    solver: str = "exact",
    threads: int = 1,
) -> tuple[WeightVector, LearnDiagnostics]:
    """Learn feature weights by cutting-plane minimization of the regularized MESA risk.

    Args:
        train: sequence of :class:`TrainingInstance` sharing one vocabulary layout.
        reg: ``"l1"`` or ``"tik"`` (Tikhonov with identity matrix).
        lambda_fit: weight of the summed MESA distances.
        lambda1: L1 strength (unused for Tikhonov).
        eps_cut: a box is added only if its excess beats the frame's slack by this many persons.
        max_outer: cap on cutting-plane rounds; hitting it is flagged, not raised.
        solver: ``"exact"`` (LP/QP) or ``"subgradient"`` for the restricted problem.
        threads: worker threads for the per-frame box search.

    Returns:
        The incumbent (lowest true objective) weights and the run diagnostics.
    """
    train = list(train)
    if not train:
        raise ValueError("empty training set")
    if reg not in REGULARIZERS:
        raise ValueError(f"unknown regularizer {reg!r}; expected one of {REGULARIZERS}")
    if not lambda_fit > 0:
        raise ValueError("lambda_fit must be positive")
    if solver not in ("exact", "subgradient"):
        raise ValueError(f"unknown inner solver {solver!r}")
    layout = train[0].features.vocab_sizes
    for inst in train[1:]:
        if inst.features.vocab_sizes != layout:
            raise ValueError(
                f"frame {inst.frame}: vocabulary layout {inst.features.vocab_sizes} != {layout}"
            )

    t_start = time.perf_counter()
    n = int(sum(layout))
    n_inst = len(train)
    frames = [_Frame(inst) for inst in train]
    seen = np.zeros(n, dtype=bool)
    for fr in frames:
        seen[np.unique(fr.gidx)] = True

    rows: list[BoxConstraint] = []
    keys: set[tuple[int, BoxRegion]] = set()

    def add(i: int, box: BoxRegion) -> bool:
        if (i, box) in keys:
            return False
        keys.add((i, box))
        rows.append(frames[i].constraint(i, box))
        return True

    for i, fr in enumerate(frames):
        add(i, full_box(fr.feat.width, fr.feat.height))

    def true_objective(w):
        found = _map(lambda fr: _search(fr, w), frames, threads)
        mesa = np.array([max(o[1], u[1], 0.0) for o, u in found])
        return regularizer(w, reg, lambda1) + lambda_fit * mesa.sum(), mesa, found

    diag = LearnDiagnostics()
    best_w = np.zeros(n)
    best_obj = np.inf
    w = np.zeros(n)
    for it in range(1, max_outer + 1):
        A = np.array([r.counts for r in rows])
        t = np.array([r.target for r in rows])
        inst = np.array([r.instance for r in rows])
        if solver == "exact":
            w, xi, inner = _solve_exact(A, t, inst, n_inst, reg, lambda_fit, lambda1)
        else:
            w, xi, inner = _solve_subgradient(A, t, inst, n_inst, reg, lambda_fit, lambda1, w)
        # features never observed in training cannot move any constraint
        w[~seen] = 0.0

        obj, mesa, found = true_objective(w)
        violation = mesa - xi
        diag.iterations = it
        diag.inner_objectives.append(inner)
        diag.iterate_objectives.append(obj)
        diag.max_violation.append(float(violation.max()))
        if obj < best_obj:
            best_obj, best_w = obj, w.copy()
        diag.objectives.append(best_obj)
        logger.info(
            "outer %d: objective %.6g (incumbent %.6g), inner %.6g, %d boxes, max violation %.4g",
            it, obj, best_obj, inner, len(rows), violation.max(),
        )
        if violation.max() <= eps_cut:
            diag.n_constraints.append(len(rows))
            diag.converged = True
            break
        added = 0
        for i, ((box_o, ex_o), (box_u, ex_u)) in enumerate(found):
            if ex_o > xi[i] + eps_cut:
                added += add(i, box_o)
            if ex_u > xi[i] + eps_cut:
                added += add(i, box_u)
        diag.n_constraints.append(len(rows))
        if not added:
            # every violated box is already stored: the restricted solve is inexact
            logger.warning("outer %d: no new constraints despite violation %.4g", it, violation.max())
            break
    else:
        logger.warning("cutting-plane loop stopped at max_outer=%d without convergence", max_outer)

    _, mesa, _ = true_objective(best_w)
    slacks = np.zeros(n_inst)
    for r in rows:
        slacks[r.instance] = max(slacks[r.instance], abs(r.counts @ best_w - r.target))
    diag.mesa = mesa
    diag.slacks = slacks
    diag.final_max_violation = float(np.max(mesa - slacks))
    diag.seconds = time.perf_counter() - t_start
    model = WeightVector(best_w, layout, reg=reg, lambda_fit=lambda_fit, lambda1=lambda1)
    return model, diag


def _map(fn, items, threads):
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def predict_counts(model: WeightVector, feature_maps) -> np.ndarray:
    out = []
    for feat in feature_maps:
        model.check_layout(feat)
        out.append(float(estimate_density(feat, model).sum()))
    return np.array(out)


# --------------------------------------------------------------------------- model file


def save_model(model: WeightVector, path: str | os.PathLike) -> None:
    """``CMODEL 1 <n> <L1|TIK> <lambda_fit> <lambda1>``, layout line, float64 weights."""
    head = f"CMODEL 1 {model.n_features} {_REG_TAGS[model.reg]} {model.lambda_fit!r} {model.lambda1!r}\n"
    layout = " ".join(str(x) for x in (len(model.vocab_sizes),) + model.vocab_sizes) + "\n"
    with open(path, "wb") as fh:
        fh.write(head.encode("ascii"))
        fh.write(layout.encode("ascii"))
        fh.write(np.ascontiguousarray(model.weights, dtype="<f8").tobytes())


def load_model(path: str | os.PathLike, expect_layout: tuple[int, ...] | None = None) -> WeightVector:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl1 = raw.find(b"\n")
    nl2 = raw.find(b"\n", nl1 + 1) if nl1 >= 0 else -1
    if nl2 < 0:
        raise FormatError(f"{path}: truncated model header")
    head = raw[:nl1].decode("ascii", errors="replace").split()
    if len(head) != 6 or head[0] != "CMODEL":
        raise FormatError(f"{path}: not a CMODEL file")
    if head[1] != "1":
        raise FormatError(f"{path}: unsupported CMODEL version {head[1]}")
    tags = {v: k for k, v in _REG_TAGS.items()}
    if head[3] not in tags:
        raise FormatError(f"{path}: unknown regularizer tag {head[3]!r}")
    try:
        n = int(head[2])
        lambda_fit, lambda1 = float(head[4]), float(head[5])
        layout = [int(x) for x in raw[nl1 + 1:nl2].decode("ascii").split()]
    except (ValueError, UnicodeDecodeError):
        raise FormatError(f"{path}: malformed CMODEL header") from None
    if not layout or layout[0] != len(layout) - 1 or sum(layout[1:]) != n:
        raise FormatError(f"{path}: vocabulary layout line inconsistent with {n} features")
    body = raw[nl2 + 1:]
    if len(body) != 8 * n:
        raise FormatError(f"{path}: expected {8 * n} weight bytes, found {len(body)}")
    weights = np.frombuffer(body, dtype="<f8").astype(np.float64)
    try:
        model = WeightVector(weights, tuple(layout[1:]), reg=tags[head[3]], lambda_fit=lambda_fit, lambda1=lambda1)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if expect_layout is not None and tuple(expect_layout) != model.vocab_sizes:
        raise ValueError(f"model layout {model.vocab_sizes} does not match expected {tuple(expect_layout)}")
    return model
