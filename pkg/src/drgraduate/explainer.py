"""Grade-wise explanation maps from the lesion map, their objects, and overlap scores.

Every lesion-map cell whose value rounds to grade c (1..4) places a unit
impulse at pixel ``(s*i, s*j)`` of the grade-c map; the impulses are then
spread by a peak-normalized Gaussian whose width follows the receptive
field.  Thresholding a map and taking 8-connected components gives the
predicted objects that are compared with ground-truth lesion masks.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import imageio

MAP_GRADES = (1, 2, 3, 4)
DEFAULT_THRESHOLD = 0.3
THRESHOLD_SWEEP = (0.1, 0.3, 0.5, 0.7)
EIGHT = np.ones((3, 3), dtype=bool)


def cell_grades(L: np.ndarray) -> np.ndarray:
    """Grade of each cell: c where c-0.5 <= L < c+0.5; values >= 4.5 count as 4, values < 0.5 as 0."""
    L = np.asarray(L, dtype=np.float64)
    return np.clip(np.floor(L + 0.5), 0, 4).astype(np.int64)


def kernel_sigma(rf: float) -> float:
    return rf / 6.0


def gaussian_window(rf: int) -> np.ndarray:
    """Square window of odd side (RF, or RF+1 when RF is even) with peak exactly 1 at its centre."""
    side = int(rf) + (1 - int(rf) % 2)
    h = side // 2
    x = np.arange(-h, h + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / kernel_sigma(rf)) ** 2)
    return np.outer(g, g)


def impulse_positions(L: np.ndarray, stride: int, origin: int = 0) -> dict:
    """grade -> list of (row, col) impulse pixels."""
    grades = cell_grades(L)
    out = {c: [] for c in MAP_GRADES}
    for i, j in zip(*np.nonzero(grades)):
        out[int(grades[i, j])].append((origin + stride * int(i), origin + stride * int(j)))
    return out


@dataclass
class ExplanationMap:
    maps: dict            # grade 1..4 -> float [side, side]
    stride: int
    rf: int
    threshold: float = DEFAULT_THRESHOLD

    @property
    def sigma(self) -> float:
        return kernel_sigma(self.rf)

    @property
    def side(self) -> int:
        return next(iter(self.maps.values())).shape[0]


def build_maps(L: np.ndarray, stride: int, rf: int, image_side: int, origin: int = 0) -> ExplanationMap:
    """Sum of shifted kernels, one per impulse; kernel parts outside the image are dropped.

    ``origin`` shifts every impulse by the same number of pixels (0 places
    cell (i, j) at (s*i, s*j)).
    """
    L = np.asarray(L, dtype=np.float64)
    if L.ndim != 2:
        raise ValueError(f"lesion map must be 2-D, got shape {L.shape}")
    win = gaussian_window(rf)
    h = win.shape[0] // 2
    maps = {}
    for c, pts in impulse_positions(L, stride, origin).items():
        E = np.zeros((image_side, image_side))
        for r, q in pts:
            r0, r1 = max(r - h, 0), min(r + h + 1, image_side)
            q0, q1 = max(q - h, 0), min(q + h + 1, image_side)
            if r0 >= r1 or q0 >= q1:
                continue
            E[r0:r1, q0:q1] += win[r0 - (r - h):r1 - (r - h), q0 - (q - h):q1 - (q - h)]
        maps[c] = E
    return ExplanationMap(maps, stride, rf)


@dataclass
class Component:
    pixels: np.ndarray   # [n, 2] (row, col)
    mask: np.ndarray     # bool [side, side]
    peak: float
    peak_pixel: tuple

    @property
    def size(self) -> int:
        return len(self.pixels)


def extract_objects(E: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> list:
    """8-connected components of ``{E >= threshold}``, largest peak first."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    E = np.asarray(E, dtype=np.float64)
    labels, n = ndimage.label(E >= threshold, structure=EIGHT)
    out = []
    for k in range(1, n + 1):
        mask = labels == k
        pix = np.argwhere(mask)
        vals = E[mask]
        a = int(np.argmax(vals))
        out.append(Component(pix, mask, float(vals[a]), tuple(int(v) for v in pix[a])))
    out.sort(key=lambda comp: -comp.peak)
    return out


def mask_objects(mask: np.ndarray) -> list:
    """Connected lesions of a ground-truth mask as boolean masks."""
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT)
    return [labels == k for k in range(1, n + 1)]


# ---------------------------------------------------------------------------
# overlap with ground truth
# ---------------------------------------------------------------------------

@dataclass
class ExplainedImage:
    """Everything the overlap scores need for one image.

    ``objects`` maps grade -> list of :class:`Component`; ``masks`` maps
    grade 1..4 -> bool array.  ``max_pixel`` is the impulse pixel of the
    lesion-map maximum; when absent the highest-peak object of the
    predicted grade is used.
    """
    objects: dict
    masks: dict
    pred: int
    true: int
    max_pixel: tuple | None = None


OVERLAP_FIELDS = ("O_obj_g", "O_obj", "O_max", "O_class", "O_gt", "O_any")


@dataclass
class OverlapReport:
    O_obj_g: float
    O_obj: float
    O_max: float
    O_class: float
    O_gt: float
    O_any: float
    threshold: float = DEFAULT_THRESHOLD
    counts: dict = field(default_factory=dict)   # denominators

    def values(self) -> dict:
        return {k: getattr(self, k) for k in OVERLAP_FIELDS}

    def to_csv(self, path: str, comment: str | None = None) -> None:
        row = {"threshold": self.threshold, **self.values()}
        imageio.write_csv(path, ("threshold",) + OVERLAP_FIELDS, [row], comment=comment)

    @classmethod
    def from_csv(cls, path: str) -> "OverlapReport":
        rows = list(imageio.read_csv(path, OVERLAP_FIELDS))
        if len(rows) != 1:
            raise imageio.DataError(f"{path}: expected one report row, got {len(rows)}")
        lineno, row = rows[0]
        try:
            vals = {k: float(row[k]) if row[k] != "" else math.nan for k in OVERLAP_FIELDS}
            thr = float(row.get("threshold") or DEFAULT_THRESHOLD)
        except ValueError as exc:
            raise imageio.DataError(f"{path}:{lineno}: {exc}") from None
        return cls(**vals, threshold=thr)


def _ratio(hit, total):
    return hit / total if total else math.nan


def _hits(comp: Component, mask) -> bool:
    return bool(mask[comp.pixels[:, 0], comp.pixels[:, 1]].any())


def overlap_metrics(images, threshold: float = DEFAULT_THRESHOLD) -> OverlapReport:
    """The six overlap ratios over a dataset of :class:`ExplainedImage`.

    An object overlaps a mask when they share at least one pixel.
    O_max and O_class use correctly graded images of grade >= 1; an
    image without objects of its grade counts as a miss.
    """
    n_obj = hit_g = hit_le = hit_any = 0
    n_correct = hit_max = hit_class = 0
    n_gt = hit_gt = 0
    for im in images:
        side = next(iter(im.masks.values())).shape
        union_le = np.zeros(side, dtype=bool)
        lower = {}
        for c in MAP_GRADES:
            union_le = union_le | im.masks.get(c, np.zeros(side, dtype=bool))
            lower[c] = union_le
        union_all = lower[MAP_GRADES[-1]]
        for c in MAP_GRADES:
            for comp in im.objects.get(c, []):
                n_obj += 1
                hit_g += _hits(comp, im.masks[c])
                hit_le += _hits(comp, lower[c])
                hit_any += _hits(comp, union_all)
        if im.pred == im.true and im.true >= 1:
            n_correct += 1
            own = im.objects.get(im.pred, [])
            mask = im.masks[im.pred]
            hit_class += any(_hits(comp, mask) for comp in own)
            top = None
            if im.max_pixel is not None:
                top = next((comp for comp in own if comp.mask[im.max_pixel]), None)
            elif own:
                top = max(own, key=lambda comp: comp.peak)
            hit_max += top is not None and _hits(top, mask)
        # ground-truth lesions covered by predicted objects of the same or a higher grade
        for c in MAP_GRADES:
            cover = np.zeros(side, dtype=bool)
            for c2 in MAP_GRADES:
                if c2 >= c:
                    for comp in im.objects.get(c2, []):
                        cover |= comp.mask
            for gt in mask_objects(im.masks[c]):
                n_gt += 1
                hit_gt += bool((gt & cover).any())
    return OverlapReport(
        _ratio(hit_g, n_obj), _ratio(hit_le, n_obj), _ratio(hit_max, n_correct),
        _ratio(hit_class, n_correct), _ratio(hit_gt, n_gt), _ratio(hit_any, n_obj),
        threshold=threshold,
        counts={"objects": n_obj, "correct_images": n_correct, "gt_objects": n_gt},
    )


def explain_image(L, stride, rf, masks, pred, true, threshold=DEFAULT_THRESHOLD, origin=0) -> ExplainedImage:
    """Build maps from ``L``, threshold them, and pair the objects with ``masks``."""
    L = np.asarray(L, dtype=np.float64)
    side = next(iter(masks.values())).shape[0]
    em = build_maps(L, stride, rf, side, origin)
    objects = {c: extract_objects(em.maps[c], threshold) for c in MAP_GRADES}
    i, j = np.unravel_index(np.argmax(L), L.shape)
    r, q = origin + stride * int(i), origin + stride * int(j)
    max_pixel = (r, q) if 0 <= r < side and 0 <= q < side else None
    return ExplainedImage(objects, masks, int(pred), int(true), max_pixel)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

MAP_SCALE = 65535


def save_maps(em: ExplanationMap, out_dir: str, stem: str, threshold: float = DEFAULT_THRESHOLD,
              digest: str | None = None) -> list:
    """One 16-bit graymap per grade plus a ``key=value`` sidecar.

    Pixel values are ``round(E / scale * 65535)`` with ``scale`` the
    largest map value (at least 1), recorded in the sidecar.
    """
    os.makedirs(out_dir, exist_ok=True)
    scale = max(1.0, max(float(m.max()) for m in em.maps.values()))
    paths = []
    for c, E in em.maps.items():
        p = os.path.join(out_dir, f"{stem}_E{c}.pgm")
        imageio.write_pgm16(p, np.rint(np.clip(E / scale, 0, 1) * MAP_SCALE).astype(np.uint16),
                            comment=f"config_digest={digest}" if digest else None)
        paths.append(p)
    side = os.path.join(out_dir, f"{stem}_maps.txt")
    with open(side, "w") as fh:
        fh.write(f"threshold={threshold!r}\nsigma={em.sigma!r}\nstride={em.stride}\nrf={em.rf}\nscale={scale!r}\n")
        if digest:
            fh.write(f"config_digest={digest}\n")
    paths.append(side)
    return paths


def load_maps(out_dir: str, stem: str) -> ExplanationMap:
    meta = {}
    with open(os.path.join(out_dir, f"{stem}_maps.txt")) as fh:
        for line in fh:
            if "=" in line:
                k, v = line.strip().split("=", 1)
                meta[k] = v
    scale = float(meta["scale"])
    maps = {}
    for c in MAP_GRADES:
        raw = imageio.read_netpbm(os.path.join(out_dir, f"{stem}_E{c}.pgm"))
        maps[c] = raw.astype(np.float64) / MAP_SCALE * scale
    return ExplanationMap(maps, int(meta["stride"]), int(meta["rf"]), float(meta["threshold"]))


def load_masks(mask_dir: str, stem: str) -> dict:
    return {c: imageio.read_netpbm(os.path.join(mask_dir, f"{stem}_g{c}.pbm")) for c in MAP_GRADES}
