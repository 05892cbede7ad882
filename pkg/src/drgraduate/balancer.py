"""Epoch-dependent batch class ratios, batch sampling and label-preserving augmentation.

The expected share of grade ``c`` in a batch at epoch ``t`` moves
geometrically from ``w0`` to ``wf``::

    w_t = r**(t-1) * w0 + (1 - r**(t-1)) * wf
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .synthdata import largest_remainder

N_GRADES = 5
DEFAULT_WF = (0.5, 2.0, 2.0, 3.0, 3.0)
ROUNDING_MODES = ("stochastic", "largest_remainder")


def _normalize(w, name):
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (N_GRADES,) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError(f"{name} must be {N_GRADES} non-negative weights with positive sum, got {w}")
    return w / w.sum()


@dataclass(frozen=True)
class BalancingSchedule:
    w0: tuple = (1.0,) * N_GRADES
    wf: tuple = DEFAULT_WF
    r: float = 0.99
    f: int = 300  # kept for the record; the ratio formula depends only on r

    def __post_init__(self):
        if not 0 < self.r < 1:
            raise ValueError(f"r must lie in (0, 1), got {self.r}")
        object.__setattr__(self, "w0", tuple(_normalize(self.w0, "w0")))
        object.__setattr__(self, "wf", tuple(_normalize(self.wf, "wf")))

    def ratios_at(self, t: int) -> np.ndarray:
        return ratios_at(t, self)


def ratios_at(t: int, schedule: BalancingSchedule) -> np.ndarray:
    if t < 1:
        raise ValueError(f"epoch index starts at 1, got {t}")
    if t == 1:
        return np.array(schedule.w0)
    k = schedule.r ** (t - 1)
    w = k * np.asarray(schedule.w0) + (1 - k) * np.asarray(schedule.wf)
    return w / w.sum()


def apportion(batch_size: int, w) -> np.ndarray:
    """Largest-remainder class counts; ties go to the lower grade."""
    return largest_remainder(batch_size, w)


def stochastic_counts(batch_size: int, w, rng: np.random.Generator) -> np.ndarray:
    """Systematic rounding: each count is floor or ceil of ``batch_size * w``, the
    total is exact and the expected count equals ``batch_size * w``."""
    quota = batch_size * np.asarray(w, dtype=np.float64)
    edges = np.concatenate([[0.0], np.cumsum(quota)])
    edges[-1] = batch_size  # absorb rounding error
    u = rng.uniform()
    # number of points u, u+1, u+2, ... falling below each edge
    below = np.ceil(edges - u).astype(np.int64)
    return np.diff(np.clip(below, 0, batch_size))


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Augmentation:
    hflip: bool = False
    vflip: bool = False
    angle: float = 0.0        # degrees, counter-clockwise
    brightness: float = 0.0   # added to every channel
    contrast: float = 1.0     # intensity scale

    def is_identity(self) -> bool:
        return self == Augmentation()


@dataclass(frozen=True)
class AugmentationPolicy:
    flips: bool = True
    max_angle: float = 25.0
    max_brightness: float = 0.15
    contrast_range: tuple = (0.85, 1.15)

    def draw(self, rng: np.random.Generator) -> Augmentation:
        return Augmentation(
            hflip=bool(self.flips and rng.uniform() < 0.5),
            vflip=bool(self.flips and rng.uniform() < 0.5),
            angle=float(rng.uniform(-self.max_angle, self.max_angle)),
            brightness=float(rng.uniform(-self.max_brightness, self.max_brightness)),
            contrast=float(rng.uniform(*self.contrast_range)),
        )


NO_AUGMENTATION = AugmentationPolicy(flips=False, max_angle=0.0, max_brightness=0.0, contrast_range=(1.0, 1.0))


def apply_augmentation(image: np.ndarray, aug: Augmentation) -> np.ndarray:
    """Apply ``aug`` to a [H, W, C] image in [0, 1]; the shape never changes."""
    out = np.asarray(image)
    if aug.hflip:
        out = out[:, ::-1]
    if aug.vflip:
        out = out[::-1]
    if aug.angle:
        out = ndimage.rotate(out, aug.angle, axes=(1, 0), reshape=False, order=1, mode="constant", cval=0.0)
    if aug.contrast != 1.0 or aug.brightness:
        out = out * aug.contrast + aug.brightness
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

class EmptyClassError(ValueError):
    pass


@dataclass
class BatchSampler:
    """Seeded stream of batches; batch ``k`` of epoch ``t`` depends only on ``(seed, t, k)``.

    ``rounding="stochastic"`` makes the expected class counts equal
    ``batch_size * w_t``; ``"largest_remainder"`` gives the same counts
    for every batch of an epoch.
    """
    grades: np.ndarray
    schedule: BalancingSchedule = field(default_factory=BalancingSchedule)
    batch_size: int = 30
    seed: int = 0
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    rounding: str = "stochastic"

    def __post_init__(self):
        self.grades = np.asarray(self.grades, dtype=np.int64)
        if self.rounding not in ROUNDING_MODES:
            raise ValueError(f"rounding must be one of {ROUNDING_MODES}, got {self.rounding!r}")
        self.by_grade = [np.flatnonzero(self.grades == c) for c in range(N_GRADES)]
        for c, idx in enumerate(self.by_grade):
            if idx.size == 0:
                raise EmptyClassError(f"grade {c} has no images in the manifest")

    def counts(self, t: int, rng: np.random.Generator) -> np.ndarray:
        w = ratios_at(t, self.schedule)
        if self.rounding == "stochastic":
            return stochastic_counts(self.batch_size, w, rng)
        return apportion(self.batch_size, w)

    def batch(self, t: int, k: int = 0) -> list:
        """List of (manifest index, Augmentation), grouped by grade in ascending order."""
        rng = np.random.default_rng([self.seed, t, k])
        out = []
        for c, n in enumerate(self.counts(t, rng)):
            pool = self.by_grade[c]
            pick = rng.choice(pool, size=n, replace=n > pool.size)
            out += [(int(i), self.policy.draw(rng)) for i in pick]
        return out


def sample_batch(manifest, t: int, batch_size: int, seed: int, schedule: BalancingSchedule | None = None,
                 policy: AugmentationPolicy | None = None, rounding: str = "stochastic", k: int = 0) -> list:
    """One batch as (image id, Augmentation) pairs from a manifest of (id, path, grade) rows."""
    grades = [row[2] for row in manifest]
    sampler = BatchSampler(grades, schedule or BalancingSchedule(), batch_size, seed,
                           policy or AugmentationPolicy(), rounding)
    return [(manifest[i][0], aug) for i, aug in sampler.batch(t, k)]


def schedule_dict(schedule: BalancingSchedule) -> dict:
    return asdict(schedule)
