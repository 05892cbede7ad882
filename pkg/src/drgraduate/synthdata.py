"""Synthetic fundus-like images with graded lesions and quality degradations.

Each image is a reddish disc (the field of view) on a black background.
Lesions of four types are drawn inside the disc; the image label is the
highest lesion grade present, 0 when there is none.

    grade 1  tiny dark dot, 2-4 px across
    grade 2  irregular dark blotch, 6-12 px
    grade 3  pale fuzzy patch, 10-18 px
    grade 4  bright branching streak

An image of grade g always holds at least one grade-g lesion and may hold
lesions of lower grades as well.  Lesion sizes are in pixels at any image
side.  Every draw is a function of ``(seed, index)`` so images can be
generated in any order or in parallel.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import imageio

N_GRADES = 5
SCREENING_SKEW = (0.73, 0.07, 0.15, 0.025, 0.025)
BALANCED = (0.2, 0.2, 0.2, 0.2, 0.2)
REFERENCE_SIDE = 640  # blur std values are quoted at this resolution
BLUR_LEVELS = (0.0, 3.0, 6.0, 10.0, 20.0)

LESION_SIZE = {1: (2, 4), 2: (6, 12), 3: (10, 18), 4: (15, 30)}
GAP = 2  # free pixels kept between lesions


class PlacementError(RuntimeError):
    """Raised when the requested lesions do not fit inside the field of view."""


@dataclass(frozen=True)
class SynthSpec:
    side: int = 128
    mix: tuple = SCREENING_SKEW          # grade ratios, normalized on use
    main_count: tuple = (1, 3)       # lesions of the image's own grade
    minor_count: tuple = (0, 3)      # lesions of each lower grade
    fov_fraction: float = 0.46       # disc radius / side
    noise: float | tuple = 0.003     # pixel noise std, or a (low, high) range drawn per image
    defocus_fraction: float = 0.0    # share of images captured out of focus
    defocus_std: tuple = (2.0, 20.0)  # their blur std range, at REFERENCE_SIDE
    counting_mode: bool = False      # grade 3 by many grade-2 blotches instead of a grade-3 lesion
    counting_threshold: int = 20
    seed: int = 0


@dataclass
class SynthImage:
    image: np.ndarray                # [side, side, 3] float64 in [0, 1]
    grade: int
    masks: dict                      # grade 1..4 -> bool [side, side]
    lesions: list = field(default_factory=list)   # (grade, centre row, centre col)
    defocus: float = 0.0             # blur std applied at capture, at REFERENCE_SIDE


def largest_remainder(total: int, ratios) -> np.ndarray:
    """Integer counts summing to ``total`` that best match ``total * ratios``.

    Leftover units go to the largest fractional parts; ties favour the
    lower index.
    """
    w = np.asarray(ratios, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError(f"ratios must be non-negative with positive sum, got {ratios}")
    quota = total * w / w.sum()
    base = np.floor(quota).astype(np.int64)
    rem = quota - base
    short = total - int(base.sum())
    # stable sort on -rem keeps the lower index first among equal remainders
    order = np.argsort(-rem, kind="stable")
    base[order[:short]] += 1
    return base


def grade_sequence(count: int, mix, seed: int) -> np.ndarray:
    """Grades for ``count`` images: exact apportionment of ``mix``, then shuffled."""
    counts = largest_remainder(count, mix)
    grades = np.repeat(np.arange(len(counts)), counts)
    np.random.default_rng([seed, 0x5EED]).shuffle(grades)
    return grades


# ---------------------------------------------------------------------------
# drawing
# ---------------------------------------------------------------------------

def _background(rng, side, fov_fraction, noise):
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    c = (side - 1) / 2.0
    r = np.hypot(yy - c, xx - c) / (fov_fraction * side)
    fov = r <= 1.0
    base = np.array([0.62, 0.30, 0.14]) * rng.uniform(0.85, 1.1)
    shade = 1.0 - 0.35 * r ** 2
    # smooth illumination variation
    low = ndimage.gaussian_filter(rng.standard_normal((side, side)), side / 10, mode="reflect")
    low *= 0.06 / max(low.std(), 1e-12)
    img = base[None, None, :] * (shade + low)[..., None]
    img += noise * rng.standard_normal(img.shape)
    img[~fov] = 0.0
    return np.clip(img, 0.0, 1.0), fov


def _disc(side, cy, cx, radius):
    yy, xx = np.ogrid[0:side, 0:side]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2


def _shape_dot(rng, side, cy, cx):
    d = rng.uniform(*LESION_SIZE[1])
    return _disc(side, cy, cx, d / 2.0), None


def _shape_blotch(rng, side, cy, cx):
    d = rng.uniform(*LESION_SIZE[2])
    mask = _disc(side, cy, cx, d / 3.0)
    for _ in range(rng.integers(2, 5)):
        a = rng.uniform(0, 2 * np.pi)
        off = rng.uniform(0.1, 0.3) * d
        mask |= _disc(side, cy + off * np.sin(a), cx + off * np.cos(a), rng.uniform(0.15, 0.25) * d)
    return mask, None


def _shape_patch(rng, side, cy, cx):
    d = rng.uniform(*LESION_SIZE[3])
    yy, xx = np.ogrid[0:side, 0:side]
    sy, sx = d / 4.0 * rng.uniform(0.8, 1.2, size=2)
    prof = np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
    mask = prof >= 0.3
    return mask, prof


def _shape_streak(rng, side, cy, cx):
    length = rng.uniform(*LESION_SIZE[4])
    mask = np.zeros((side, side), dtype=bool)
    width = rng.uniform(0.6, 1.2)

    def walk(y, x, angle, n):
        pts = []
        for _ in range(int(n)):
            angle += rng.normal(0, 0.35)
            y += np.sin(angle)
            x += np.cos(angle)
            pts.append((y, x))
        return pts

    a0 = rng.uniform(0, 2 * np.pi)
    trunk = walk(cy - length / 2 * np.sin(a0), cx - length / 2 * np.cos(a0), a0, length)
    branches = []
    for _ in range(rng.integers(2, 4)):
        k = rng.integers(len(trunk) // 4, max(len(trunk) * 3 // 4, len(trunk) // 4 + 1))
        y, x = trunk[k]
        branches += walk(y, x, a0 + rng.choice([-1, 1]) * rng.uniform(0.5, 1.1), length * rng.uniform(0.3, 0.5))
    for y, x in trunk + branches:
        mask |= _disc(side, y, x, width)
    return mask, None


_SHAPES = {1: _shape_dot, 2: _shape_blotch, 3: _shape_patch, 4: _shape_streak}


def _paint(rng, img, grade, mask, prof):
    if grade in (1, 2):
        # dark red: scale down towards a deep red
        depth = rng.uniform(0.45, 0.8)
        target = np.array([0.22, 0.04, 0.03])
        img[mask] = img[mask] * (1 - depth) + target * depth
    elif grade == 3:
        strength = rng.uniform(0.45, 0.75) * prof
        target = np.array([0.93, 0.86, 0.62])
        img[:] = img * (1 - strength[..., None]) + target * strength[..., None]
    else:
        strength = rng.uniform(0.55, 0.85)
        target = np.array([0.98, 0.88, 0.70])
        img[mask] = img[mask] * (1 - strength) + target * strength


def _place(rng, grade, side, fov_radius, occupied, attempts=200):
    extent = LESION_SIZE[grade][1]
    c = (side - 1) / 2.0
    limit = fov_radius - extent / 2.0 - GAP
    if limit <= 0:
        raise PlacementError(f"grade-{grade} lesion larger than the field of view at side {side}")
    for _ in range(attempts):
        rad = limit * np.sqrt(rng.uniform())
        ang = rng.uniform(0, 2 * np.pi)
        cy, cx = c + rad * np.sin(ang), c + rad * np.cos(ang)
        mask, prof = _SHAPES[grade](rng, side, cy, cx)
        if not mask.any():
            continue
        grown = ndimage.binary_dilation(mask, iterations=GAP)
        if not (grown & occupied).any():
            return (cy, cx), mask, prof
    raise PlacementError(f"could not place a grade-{grade} lesion after {attempts} attempts")


def render(spec: SynthSpec, grade: int, rng: np.random.Generator, lesion_counts: dict | None = None) -> SynthImage:
    """Draw one image of the given grade.

    ``lesion_counts`` (grade -> number) overrides the random counts; the
    label is then the highest grade with a positive count.
    """
    side = spec.side
    noise = spec.noise if np.isscalar(spec.noise) else rng.uniform(*spec.noise)
    img, fov = _background(rng, side, spec.fov_fraction, noise)
    if lesion_counts is None:
        lesion_counts = {}
        if grade == 3 and spec.counting_mode:
            lesion_counts[2] = int(rng.integers(spec.counting_threshold + 1, spec.counting_threshold + 6))
            lesion_counts[1] = int(rng.integers(*spec.minor_count, endpoint=True))
        elif grade > 0:
            lesion_counts[grade] = int(rng.integers(*spec.main_count, endpoint=True))
            for g in range(1, grade):
                lesion_counts[g] = int(rng.integers(*spec.minor_count, endpoint=True))
    occupied = np.zeros((side, side), dtype=bool)
    masks = {g: np.zeros((side, side), dtype=bool) for g in range(1, N_GRADES)}
    lesions = []
    # big lesions first so small ones fill the gaps
    for g in sorted(lesion_counts, reverse=True):
        for _ in range(lesion_counts[g]):
            (cy, cx), mask, prof = _place(rng, g, side, spec.fov_fraction * side, occupied)
            _paint(rng, img, g, mask, prof)
            occupied |= mask
            masks[g] |= mask
            lesions.append((g, cy, cx))
    present = [g for g, n in lesion_counts.items() if n > 0]
    label = max(present) if present else 0
    if spec.counting_mode and grade == 3 and lesion_counts.get(2, 0) > spec.counting_threshold:
        label = 3
    defocus = 0.0
    # the label stays that of the lesions even when blur hides them
    if spec.defocus_fraction > 0 and rng.uniform() < spec.defocus_fraction:
        defocus = float(rng.uniform(*spec.defocus_std))
        img = gaussian_blur(img, scaled_std(defocus, side))
    return SynthImage(np.clip(img, 0.0, 1.0), label, masks, lesions, defocus)


def generate_one(spec: SynthSpec, index: int, grade: int) -> SynthImage:
    return render(spec, int(grade), np.random.default_rng([spec.seed, index]))


def generate(spec: SynthSpec, count: int) -> list:
    """``count`` images whose grades follow ``spec.mix`` exactly (largest remainder), shuffled."""
    grades = grade_sequence(count, spec.mix, spec.seed)
    return [generate_one(spec, i, g) for i, g in enumerate(grades)]


def quantize(image: np.ndarray) -> np.ndarray:
    """Float image in [0,1] -> uint8, matching what a saved pixmap holds."""
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def write_dataset(spec: SynthSpec, count: int, out_dir: str, masks: bool = True, prefix: str = "img",
                  comment: str | None = None, degradation: "DegradationSpec | None" = None) -> str:
    """Generate and save images (PPM), per-grade masks (PBM) and ``manifest.csv``.

    ``comment`` goes into every file header; ``degradation`` is applied to
    the images before quantization (masks are unaffected).  Returns the
    manifest path.
    """
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    if masks:
        os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    grades = grade_sequence(count, spec.mix, spec.seed)
    rows = []
    for i, g in enumerate(grades):
        item = generate_one(spec, i, g)
        ident = f"{prefix}{i:05d}"
        rel = os.path.join("images", ident + ".ppm")
        image = item.image if degradation is None else degrade(item.image, degradation)
        imageio.write_ppm(os.path.join(out_dir, rel), quantize(image), comment)
        if masks:
            for c, m in item.masks.items():
                imageio.write_pbm(os.path.join(out_dir, "masks", f"{ident}_g{c}.pbm"), m, comment)
        rows.append((ident, rel, item.grade))
    path = os.path.join(out_dir, "manifest.csv")
    imageio.write_manifest(path, rows, comment)
    return path


# ---------------------------------------------------------------------------
# degradations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DegradationSpec:
    blur_std: float = 0.0            # at REFERENCE_SIDE; scaled by side / REFERENCE_SIDE on use
    contrast_ceiling: float | None = None   # absolute new maximum intensity
    contrast_factor: float | None = None    # or new maximum as a fraction of the current one


def scaled_std(std: float, side: int) -> float:
    return std * side / REFERENCE_SIDE


def gaussian_blur(image: np.ndarray, std: float) -> np.ndarray:
    """Separable Gaussian blur of the spatial axes with mirrored borders; ``std`` in pixels."""
    if std < 0:
        raise ValueError(f"blur std must be >= 0, got {std}")
    image = np.asarray(image, dtype=np.float64)
    if std == 0:
        return image.copy()
    sigma = (std, std) + (0,) * (image.ndim - 2)
    return ndimage.gaussian_filter(image, sigma, mode="reflect", truncate=6.0)


def stretch_contrast(image: np.ndarray, ceiling: float) -> np.ndarray:
    """Linear stretch mapping [min, max] onto [min, ceiling]."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi == lo:
        return image.copy()
    return lo + (image - lo) * ((ceiling - lo) / (hi - lo))


def degrade(image: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    side = image.shape[0]
    out = gaussian_blur(image, scaled_std(spec.blur_std, side))
    if spec.contrast_ceiling is not None:
        out = stretch_contrast(out, spec.contrast_ceiling)
    elif spec.contrast_factor is not None:
        out = stretch_contrast(out, out.max() * spec.contrast_factor)
    return out
