"""Deterministic synthetic crowds for tests and demos.

All randomness comes from numpy's Philox 4x64 counter-based generator seeded
with the caller's integer seed, so outputs are bit-identical across runs and
platforms. Backgrounds are analytic sums of sinusoids: any frame of an
advected sequence is evaluated exactly, with no resampling error, which makes
the ground-truth motion exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .density import AnnotationSet, estimate_density
from .features import FeatureIndexMap
from .learn import TrainingInstance

BACKGROUND_CONF = -8.0
PEAK_CONF_RANGE = (-0.6, -0.1)
PERSON_SIGMA = 6.0
DEFAULT_MIN_SEPARATION = 8.0

# default frame: a 1440x1080 aerial frame at quarter resolution
DEFAULT_SCENE_SIZE = (360, 270)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True)
class Texture:
    """Band-limited background: ``base + sum_k a_k cos(2 pi f_k . p + phi_k)``."""

    freqs: np.ndarray  # (N, 2) cycles per pixel
    phases: np.ndarray
    amps: np.ndarray
    base: float = 0.4

    @classmethod
    def random(cls, rng: np.random.Generator, n: int = 24, contrast: float = 0.3) -> "Texture":
        wavelength = rng.uniform(8.0, 32.0, n)
        angle = rng.uniform(0.0, np.pi, n)
        freqs = np.stack([np.cos(angle), np.sin(angle)], axis=1) / wavelength[:, None]
        phases = rng.uniform(0.0, 2 * np.pi, n)
        amps = np.full(n, contrast / n)
        return cls(freqs, phases, amps)

    def sample(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.full(np.broadcast(x, y).shape, self.base)
        for (fx, fy), ph, a in zip(self.freqs, self.phases, self.amps):
            out += a * np.cos(2 * np.pi * (fx * x + fy * y) + ph)
        return out


@dataclass
class Scene:
    confidence: np.ndarray
    annotations: AnnotationSet
    image: np.ndarray
    positions: np.ndarray  # (N, 2) person centers, continuous pixel coords
    peaks: np.ndarray  # (N,) peak detector confidence per person
    texture: Texture
    width: int
    height: int
    sigma: float = PERSON_SIGMA
    seed: int = 0


@dataclass(frozen=True)
class VelocitySpec:
    """Per-frame motion of persons and background.

    ``uniform``: everything moves by ``(vx, vy)`` px/frame.
    ``opposing``: the upper half (y < H/2) moves ``(+speed, 0)``, the lower half ``(-speed, 0)``.
    ``rotation``: rigid rotation by ``omega`` rad/frame about the image center.
    """

    kind: str = "uniform"
    vx: float = 0.0
    vy: float = 0.0
    speed: float = 0.0
    omega: float = 0.0

    def __post_init__(self):
        if self.kind not in ("uniform", "opposing", "rotation"):
            raise ValueError(f"unknown velocity spec {self.kind!r}")

    @classmethod
    def uniform(cls, vx: float, vy: float) -> "VelocitySpec":
        return cls("uniform", vx=vx, vy=vy)

    @classmethod
    def opposing(cls, speed: float) -> "VelocitySpec":
        return cls("opposing", speed=speed)

    @classmethod
    def rotation(cls, omega: float) -> "VelocitySpec":
        return cls("rotation", omega=omega)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "vx": self.vx, "vy": self.vy, "speed": self.speed, "omega": self.omega}

    def displace(self, x, y, t: float, width: int, height: int, upper=None):
        """Positions at time ``t`` of points that were at ``(x, y)`` at time 0.

        For ``opposing``, ``upper`` says which stream each point belongs to
        (defaults to its starting half).
        """
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if self.kind == "uniform":
            return x + t * self.vx, y + t * self.vy
        if self.kind == "opposing":
            if upper is None:
                upper = y < height / 2
            return x + np.where(upper, 1.0, -1.0) * t * self.speed, y
        cx, cy = width / 2, height / 2
        c, s = np.cos(t * self.omega), np.sin(t * self.omega)
        return cx + c * (x - cx) - s * (y - cy), cy + s * (x - cx) + c * (y - cy)

    def source(self, x, y, t: float, width: int, height: int):
        """Inverse of :meth:`displace` for background pixels (which stream a pixel is in is fixed by its row)."""
        if self.kind == "opposing":
            return self.displace(x, y, -t, width, height, upper=np.asarray(y) < height / 2)
        return self.displace(x, y, -t, width, height)


def gt_displacement(spec: VelocitySpec, gap: int, width: int, height: int) -> np.ndarray:
    """Exact ``(H, W, 2)`` displacement of every pixel center over ``gap`` frames."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    nx, ny = spec.displace(xx, yy, gap, width, height)
    return np.stack([nx - xx, ny - yy], axis=2)


def _place(rng, n, width, height, min_sep, margin, max_tries=200):
    pts = np.empty((n, 2))
    cell = max(min_sep, 1e-9)
    grid: dict[tuple[int, int], list[int]] = {}
    for i in range(n):
        for _ in range(max_tries):
            p = rng.uniform([margin, margin], [width - margin, height - margin])
            gx, gy = int(p[0] // cell), int(p[1] // cell)
            ok = True
            for ix in range(gx - 1, gx + 2):
                for iy in range(gy - 1, gy + 2):
                    for j in grid.get((ix, iy), ()):
                        if np.hypot(*(pts[j] - p)) < min_sep:
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    break
            if ok:
                pts[i] = p
                grid.setdefault((gx, gy), []).append(i)
                break
        else:
            raise ValueError(
                f"cannot place {n} persons with {min_sep} px separation in a {width}x{height} frame"
            )
    return pts


def render_confidence(positions, peaks, width, height, sigma=PERSON_SIGMA, background=BACKGROUND_CONF):
    """Detector-like confidence map: max over per-person Gaussian bumps."""
    conf = np.full((height, width), background, dtype=np.float64)
    r = int(np.ceil(4 * sigma))
    for (x, y), peak in zip(positions, peaks):
        i0, i1 = max(int(x) - r, 0), min(int(x) + r + 1, width)
        j0, j1 = max(int(y) - r, 0), min(int(y) + r + 1, height)
        if i0 >= i1 or j0 >= j1:
            continue
        dx = np.arange(i0, i1) + 0.5 - x
        dy = np.arange(j0, j1) + 0.5 - y
        bump = background + (peak - background) * np.exp(
            -(dy[:, None] ** 2 + dx[None, :] ** 2) / (2 * sigma * sigma)
        )
        np.maximum(conf[j0:j1, i0:i1], bump, out=conf[j0:j1, i0:i1])
    return conf


def render_image(texture: Texture, positions, width, height, sigma=PERSON_SIGMA, sample_at=None):
    """Background texture with bright person blobs, in [0, 1]."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    sx, sy = (xx, yy) if sample_at is None else sample_at(xx, yy)
    img = texture.sample(sx, sy)
    blobs = np.zeros((height, width))
    r = int(np.ceil(3 * sigma))
    s2 = (0.5 * sigma) ** 2
    for x, y in positions:
        i0, i1 = max(int(x) - r, 0), min(int(x) + r + 1, width)
        j0, j1 = max(int(y) - r, 0), min(int(y) + r + 1, height)
        if i0 >= i1 or j0 >= j1:
            continue
        dx = np.arange(i0, i1) + 0.5 - x
        dy = np.arange(j0, j1) + 0.5 - y
        np.maximum(blobs[j0:j1, i0:i1], np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) / (2 * s2)),
                   out=blobs[j0:j1, i0:i1])
    return np.clip(img + 0.25 * blobs, 0.0, 1.0)


def generate_scene(
    n_persons: int,
    width: int,
    height: int,
    seed: int,
    sigma: float = PERSON_SIGMA,
    min_separation: float = DEFAULT_MIN_SEPARATION,
    frame: str = "0",
    margin: float | None = None,
) -> Scene:
    """Place ``n_persons`` confidence bumps on a textured background."""
    if n_persons < 0:
        raise ValueError("n_persons must be nonnegative")
    if width < 1 or height < 1:
        raise ValueError("frame must be nonempty")
    rng = make_rng(seed)
    texture = Texture.random(rng)
    margin = min(2.0, width / 4, height / 4) if margin is None else margin
    positions = _place(rng, n_persons, width, height, min_separation, margin)
    peaks = rng.uniform(*PEAK_CONF_RANGE, n_persons)
    conf = render_confidence(positions, peaks, width, height, sigma)
    image = render_image(texture, positions, width, height, sigma)
    ann = AnnotationSet(frame, positions.copy())
    return Scene(conf, ann, image, positions, peaks, texture, width, height, sigma, seed)


def generate_scene_set(n_scenes, mean_count, std_count, width, height, seed, prefix="f", **kw) -> list[Scene]:
    """Independent scenes with person counts drawn from N(mean, std), rounded."""
    rng = make_rng(seed)
    counts = np.maximum(np.round(rng.normal(mean_count, std_count, n_scenes)), 0).astype(int)
    child = rng.integers(0, 2**62, n_scenes)
    return [
        generate_scene(int(c), width, height, int(s), frame=f"{prefix}{i:04d}", **kw)
        for i, (c, s) in enumerate(zip(counts, child))
    ]


@dataclass
class Sequence:
    frames: list[np.ndarray]
    confidences: list[np.ndarray]
    annotations: list[AnnotationSet]
    spec: VelocitySpec
    width: int
    height: int
    seed: int
    meta: dict = field(default_factory=dict)

    def gt_displacement(self, gap: int) -> np.ndarray:
        return gt_displacement(self.spec, gap, self.width, self.height)


def generate_sequence(
    scene: Scene,
    spec: VelocitySpec,
    n_frames: int,
    seed: int = 0,
    noise_std: float = 0.0,
) -> Sequence:
    """Advect persons and background of ``scene`` for ``n_frames`` frames.

    Frame 0 reproduces the scene. Optional Gaussian sensor noise (drawn from
    ``seed``) is added to the images, which are then clipped to [0, 1].
    """
    if n_frames < 1:
        raise ValueError("need at least one frame")
    w, h = scene.width, scene.height
    upper = scene.positions[:, 1] < h / 2
    tracks = []
    for t in range(n_frames):
        x, y = spec.displace(scene.positions[:, 0], scene.positions[:, 1], t, w, h, upper=upper)
        pos = np.stack([x, y], axis=1)
        if len(pos) and (pos.min() < 0 or np.any(pos[:, 0] > w) or np.any(pos[:, 1] > h)):
            raise ValueError(f"persons leave the {w}x{h} frame by frame {t}; shorten the sequence or slow the motion")
        tracks.append(pos)
    rng = make_rng(seed)
    frames, confs, anns = [], [], []
    for t, pos in enumerate(tracks):
        img = render_image(
            scene.texture, pos, w, h, scene.sigma,
            sample_at=lambda xx, yy, t=t: spec.source(xx, yy, t, w, h),
        )
        if noise_std > 0:
            img = np.clip(img + rng.normal(0.0, noise_std, img.shape), 0.0, 1.0)
        frames.append(img)
        confs.append(render_confidence(pos, scene.peaks, w, h, scene.sigma))
        anns.append(AnnotationSet(f"{t:05d}", pos))
    return Sequence(frames, confs, anns, spec, w, h, seed, {"noise_std": noise_std})


def generate_planted_training(
    n_frames: int,
    k: int,
    w_star,
    seed: int,
    width: int = 128,
    height: int = 128,
    index_probs=None,
    prefix: str = "p",
) -> list[TrainingInstance]:
    """Random single-channel feature maps whose GT density is exactly ``est(w_star)``."""
    w_star = np.asarray(w_star, dtype=np.float64)
    if w_star.shape != (k,):
        raise ValueError(f"w_star must have {k} entries")
    if np.any(w_star < 0):
        raise ValueError("planted weights must be nonnegative")
    rng = make_rng(seed)
    out = []
    seen = np.zeros(k, dtype=bool)
    for i in range(n_frames):
        idx = rng.choice(k, size=(height, width), p=index_probs).astype(np.int32)
        seen[np.unique(idx)] = True
        feat = FeatureIndexMap(idx[:, :, None], (k,))
        out.append(TrainingInstance(feat, estimate_density(feat, w_star), f"{prefix}{i:04d}"))
    if not seen.all():
        missing = np.flatnonzero(~seen)
        raise ValueError(f"feature indices {missing.tolist()} never appear; every index must be covered")
    return out
