"""Discretized per-pixel features: confidence binning, dense gradient
descriptors, k-means codebooks, nearest-prototype quantization and stacking.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .grids import FormatError, as_grid

logger = logging.getLogger(__name__)

# detector confidences outside this range carry no counting information
DEFAULT_MIN_CONF = -4.0
DEFAULT_MAX_CONF = -0.6
DEFAULT_BINS = 256
DEFAULT_CODEBOOK_SIZE = 256

DESCRIPTOR_DIM = 128
_N_ORIENT = 8
_N_CELLS = 4
_CLIP = 0.2


@dataclass(frozen=True)
class FeatureIndexMap:
    """Per-pixel, per-channel discretized feature indices.

    ``indices`` has shape ``(H, W, C)`` and holds the *local* index of each
    channel; :meth:`global_indices` adds the stacking offsets.
    """

    indices: np.ndarray
    vocab_sizes: tuple[int, ...]

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if idx.ndim == 2:
            idx = idx[:, :, None]
        if idx.ndim != 3:
            raise ValueError(f"indices must be (H, W) or (H, W, C), got {idx.shape}")
        sizes = tuple(int(k) for k in self.vocab_sizes)
        if len(sizes) != idx.shape[2]:
            raise ValueError(f"{idx.shape[2]} channel(s) but {len(sizes)} vocabulary size(s)")
        if any(k < 1 for k in sizes):
            raise ValueError("vocabulary sizes must be positive")
        if not np.issubdtype(idx.dtype, np.integer):
            raise ValueError("feature indices must be integers")
        idx = idx.astype(np.int32, copy=False)
        for c, k in enumerate(sizes):
            ch = idx[:, :, c]
            if ch.size and (ch.min() < 0 or ch.max() >= k):
                raise ValueError(f"channel {c} has indices outside [0, {k - 1}]")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "vocab_sizes", sizes)

    @property
    def width(self) -> int:
        return self.indices.shape[1]

    @property
    def height(self) -> int:
        return self.indices.shape[0]

    @property
    def channels(self) -> int:
        return self.indices.shape[2]

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(o) for o in np.concatenate([[0], np.cumsum(self.vocab_sizes)[:-1]]))

    @property
    def n_features(self) -> int:
        return int(sum(self.vocab_sizes))

    def global_indices(self) -> np.ndarray:
        return self.indices + np.asarray(self.offsets, dtype=np.int32)


@dataclass
class Codebook:
    prototypes: np.ndarray  # (K, D) float32
    seed: int = 0
    iterations: int = 0
    distortion: float = float("nan")
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]


# --------------------------------------------------------------------------- confidences


def quantize_confidences(
    conf,
    min_conf: float = DEFAULT_MIN_CONF,
    max_conf: float = DEFAULT_MAX_CONF,
    bins: int = DEFAULT_BINS,
) -> FeatureIndexMap:
    """Saturate detector confidences to ``[min_conf, max_conf]`` and bin them.

    Bin = round-half-away-from-zero of the clamped value scaled to
    ``[0, bins - 1]``.
    """
    if not min_conf < max_conf:
        raise ValueError(f"min_conf ({min_conf}) must be below max_conf ({max_conf})")
    if bins < 2:
        raise ValueError("need at least 2 bins")
    conf = as_grid(conf, channels=1)
    if conf.ndim == 3:
        conf = conf[:, :, 0]
    scaled = (np.clip(conf.astype(np.float64), min_conf, max_conf) - min_conf) / (max_conf - min_conf)
    # scaled >= 0, so floor(x + 0.5) rounds half away from zero
    idx = np.floor(scaled * (bins - 1) + 0.5).astype(np.int32)
    np.clip(idx, 0, bins - 1, out=idx)
    return FeatureIndexMap(idx[:, :, None], (bins,))


# --------------------------------------------------------------------------- descriptors


def _orientation_channels(image: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(image)
    mag = np.hypot(gx, gy)
    ori = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    pos = ori / (2 * np.pi / _N_ORIENT)
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(np.int64) % _N_ORIENT
    hi = (lo + 1) % _N_ORIENT
    chans = np.zeros((_N_ORIENT,) + image.shape, dtype=np.float64)
    rows, cols = np.indices(image.shape)
    np.add.at(chans, (lo, rows, cols), mag * (1 - frac))
    np.add.at(chans, (hi, rows, cols), mag * frac)
    return chans


def dense_descriptors(image, patch: int = 16) -> np.ndarray:
    """SIFT-like 128-d descriptor at every pixel.

    Each descriptor is a 4x4 grid of cells (``patch / 4`` pixels wide) of
    8-bin gradient orientation histograms over the patch centered on the
    pixel, L2-normalized, clipped at 0.2 and renormalized. Flat patches give
    the zero descriptor. Returns an ``(H, W, 128)`` float32 array.
    """
    img = as_grid(image, channels=1)
    if img.ndim == 3:
        img = img[:, :, 0]
    img = img.astype(np.float64)
    h, w = img.shape
    if patch < 4 or patch % 4:
        raise ValueError(f"patch size must be a positive multiple of 4, got {patch}")
    if patch > min(h, w):
        raise ValueError(f"patch {patch} larger than image {w}x{h}")

    cell = patch // 4
    half = patch // 2
    chans = _orientation_channels(img)
    # zero-padded summed-area table of each orientation channel
    pad = patch
    padded = np.zeros((_N_ORIENT, h + 2 * pad, w + 2 * pad))
    padded[:, pad:pad + h, pad:pad + w] = chans
    sat = np.zeros((_N_ORIENT, h + 2 * pad + 1, w + 2 * pad + 1))
    sat[:, 1:, 1:] = padded.cumsum(axis=1).cumsum(axis=2)

    desc = np.empty((h, w, DESCRIPTOR_DIM), dtype=np.float64)
    for i in range(_N_CELLS):
        y0 = pad - half + i * cell
        for j in range(_N_CELLS):
            x0 = pad - half + j * cell
            s = (
                sat[:, y0 + cell:y0 + cell + h, x0 + cell:x0 + cell + w]
                - sat[:, y0:y0 + h, x0 + cell:x0 + cell + w]
                - sat[:, y0 + cell:y0 + cell + h, x0:x0 + w]
                + sat[:, y0:y0 + h, x0:x0 + w]
            )
            k = (i * _N_CELLS + j) * _N_ORIENT
            desc[:, :, k:k + _N_ORIENT] = np.moveaxis(s, 0, -1)

    np.maximum(desc, 0.0, out=desc)  # cancel round-off of the table differences
    norm = np.linalg.norm(desc, axis=2, keepdims=True)
    textured = norm[:, :, 0] > 1e-9
    desc = np.where(textured[:, :, None], desc / np.where(norm > 0, norm, 1.0), 0.0)
    np.minimum(desc, _CLIP, out=desc)
    norm = np.linalg.norm(desc, axis=2, keepdims=True)
    desc = np.where(textured[:, :, None], desc / np.where(norm > 0, norm, 1.0), 0.0)
    return desc.astype(np.float32)


# --------------------------------------------------------------------------- codebook


def _rng(seed: int) -> np.random.Generator:
    # Philox: counter-based, fixed algorithm, platform independent streams
    return np.random.Generator(np.random.Philox(int(seed)))


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def nearest_prototype(x: np.ndarray, centers: np.ndarray, chunk: int = 8192) -> tuple[np.ndarray, np.ndarray]:
    """Index of and squared distance to the nearest center; ties -> lowest index.

    Distances come from the expanded dot-product form; rows whose best and
    runner-up are within round-off are re-resolved with exact differences so
    the tie rule does not depend on BLAS summation order.
    """
    x = np.asarray(x, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    labels = np.empty(len(x), dtype=np.int64)
    dists = np.empty(len(x), dtype=np.float64)
    scale = 1.0 + (centers * centers).sum(1).max() if len(centers) else 1.0
    for start in range(0, len(x), chunk):
        xb = x[start:start + chunk]
        d = _sq_dists(xb, centers)
        lab = d.argmin(1)
        dmin = d[np.arange(len(xb)), lab]
        near = (d <= dmin[:, None] + 1e-9 * (scale + (xb * xb).sum(1))[:, None]).sum(1) > 1
        for r in np.flatnonzero(near):
            exact = ((centers - xb[r]) ** 2).sum(1)
            lab[r] = int(np.argmin(exact))
            dmin[r] = exact[lab[r]]
        labels[start:start + chunk] = lab
        dists[start:start + chunk] = dmin
    return labels, dists


def build_codebook(
    samples,
    k: int = DEFAULT_CODEBOOK_SIZE,
    seed: int = 0,
    max_iter: int = 50,
    tol: float = 1e-6,
) -> Codebook:
    """k-means with k-means++ seeding; deterministic for a given seed.

    Stops after ``max_iter`` Lloyd iterations or once the relative change in
    mean distortion drops below ``tol``. Empty clusters are re-seeded with the
    sample farthest from its current prototype.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("samples must be an (N, D) array")
    n = len(x)
    if k < 1:
        raise ValueError("k must be positive")
    if n < k:
        raise ValueError(f"need at least k={k} samples, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples contain NaN or Inf")

    rng = _rng(seed)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = ((x - centers[0]) ** 2).sum(1)
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            raise ValueError(f"only {c} distinct samples; cannot build {k} distinct prototypes")
        pick = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
        pick = min(pick, n - 1)
        while closest[pick] == 0:  # never land on an existing center
            pick = (pick + 1) % n
        centers[c] = x[pick]
        np.minimum(closest, ((x - centers[c]) ** 2).sum(1), out=closest)

    prev = np.inf
    distortion = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        labels, d = nearest_prototype(x, centers)
        distortion = float(d.mean())
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        taken = np.zeros(n, dtype=bool)
        for c in np.flatnonzero(~nonempty):
            far = np.where(taken, -1.0, d)
            pick = int(np.argmax(far))
            taken[pick] = True
            centers[c] = x[pick]
            logger.debug("k-means: re-seeded empty cluster %d with sample %d", c, pick)
        if np.isfinite(prev) and abs(prev - distortion) <= tol * max(prev, 1e-300):
            break
        prev = distortion

    protos = centers.astype(np.float32)
    if len(np.unique(protos, axis=0)) != k:
        raise ValueError("k-means produced duplicate prototypes; too few distinct samples")
    return Codebook(protos, seed=int(seed), iterations=it, distortion=distortion)


def sample_descriptors(descriptor_maps, n_samples: int, seed: int = 0, drop_zero: bool = True) -> np.ndarray:
    """Draw up to ``n_samples`` descriptors uniformly from a list of maps."""
    rows = [np.asarray(m, dtype=np.float32).reshape(-1, np.asarray(m).shape[-1]) for m in descriptor_maps]
    allrows = np.concatenate(rows)
    if drop_zero:
        allrows = allrows[np.any(allrows != 0, axis=1)]
    if len(allrows) <= n_samples:
        return allrows
    pick = np.sort(_rng(seed).choice(len(allrows), size=n_samples, replace=False))
    return allrows[pick]


def quantize_descriptors(desc, book: Codebook) -> FeatureIndexMap:
    """Assign every pixel the index of its nearest prototype."""
    desc = np.asarray(desc)
    if desc.ndim != 3:
        raise ValueError("descriptor map must be (H, W, D)")
    if desc.shape[2] != book.dim:
        raise ValueError(f"descriptor dimension {desc.shape[2]} != codebook dimension {book.dim}")
    h, w, dim = desc.shape
    labels, _ = nearest_prototype(desc.reshape(-1, dim), book.prototypes)
    return FeatureIndexMap(labels.reshape(h, w, 1).astype(np.int32), (book.size,))


# --------------------------------------------------------------------------- stacking


def stack_feature_maps(maps) -> FeatureIndexMap:
    maps = list(maps)
    if not maps:
        raise ValueError("nothing to stack")
    shape = maps[0].indices.shape[:2]
    for m in maps[1:]:
        if m.indices.shape[:2] != shape:
            raise ValueError(f"feature maps differ in size: {m.indices.shape[:2]} vs {shape}")
    indices = np.concatenate([m.indices for m in maps], axis=2)
    sizes = tuple(k for m in maps for k in m.vocab_sizes)
    return FeatureIndexMap(indices, sizes)


def unstack_feature_map(fmap: FeatureIndexMap) -> list[FeatureIndexMap]:
    return [FeatureIndexMap(fmap.indices[:, :, c:c + 1].copy(), (k,)) for c, k in enumerate(fmap.vocab_sizes)]


# --------------------------------------------------------------------------- files

_CFEAT = "CFEAT"
_CBOOK = "CBOOK"


def write_feature_map(path: str | os.PathLike, fmap: FeatureIndexMap) -> None:
    """``CFEAT 1 <w> <h> <channels> <K_0> ...`` + little-endian int32 indices."""
    sizes = " ".join(str(k) for k in fmap.vocab_sizes)
    header = f"{_CFEAT} 1 {fmap.width} {fmap.height} {fmap.channels} {sizes}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(fmap.indices, dtype="<i4").tobytes())


def read_feature_map(path: str | os.PathLike) -> FeatureIndexMap:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    parts = raw[:nl].decode("ascii", errors="replace").split() if nl >= 0 else []
    if len(parts) < 6 or parts[0] != _CFEAT:
        raise FormatError(f"{path}: not a CFEAT feature map")
    if parts[1] != "1":
        raise FormatError(f"{path}: unsupported CFEAT version {parts[1]}")
    try:
        w, h, c = (int(p) for p in parts[2:5])
        sizes = tuple(int(p) for p in parts[5:])
    except ValueError:
        raise FormatError(f"{path}: malformed CFEAT header") from None
    if len(sizes) != c:
        raise FormatError(f"{path}: {c} channels but {len(sizes)} vocabulary sizes")
    body = raw[nl + 1:]
    if len(body) != w * h * c * 4:
        raise FormatError(f"{path}: expected {w * h * c * 4} payload bytes, found {len(body)}")
    idx = np.frombuffer(body, dtype="<i4").astype(np.int32).reshape(h, w, c)
    try:
        return FeatureIndexMap(idx, sizes)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_codebook(path: str | os.PathLike, book: Codebook) -> None:
    header = f"{_CBOOK} 1 {book.size} {book.dim} {book.seed}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(book.prototypes, dtype="<f4").tobytes())


def read_codebook(path: str | os.PathLike) -> Codebook:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    parts = raw[:nl].decode("ascii", errors="replace").split() if nl >= 0 else []
    if len(parts) != 5 or parts[0] != _CBOOK:
        raise FormatError(f"{path}: not a CBOOK codebook")
    if parts[1] != "1":
        raise FormatError(f"{path}: unsupported CBOOK version {parts[1]}")
    try:
        k, d, seed = (int(p) for p in parts[2:])
    except ValueError:
        raise FormatError(f"{path}: malformed CBOOK header") from None
    body = raw[nl + 1:]
    if len(body) != k * d * 4:
        raise FormatError(f"{path}: expected {k * d * 4} payload bytes, found {len(body)}")
    protos = np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(k, d)
    return Codebook(protos, seed=seed)
