"""Agreement and uncertainty metrics for ordinal grade predictions.

Confusion matrices follow the convention ``O[i, j]`` = number of samples of
true grade ``j`` predicted as grade ``i``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_CLASSES = 5
DEFAULT_FIRST_THRESHOLD = 0.15


def confusion_matrix(true, pred, n_classes: int = N_CLASSES) -> np.ndarray:
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if true.shape != pred.shape:
        raise ValueError(f"true and pred differ in length: {true.shape} vs {pred.shape}")
    if true.size and (min(true.min(), pred.min()) < 0 or max(true.max(), pred.max()) >= n_classes):
        raise ValueError(f"grades must lie in 0..{n_classes - 1}")
    O = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(O, (pred, true), 1)
    return O


def quadratic_weights(n_classes: int = N_CLASSES) -> np.ndarray:
    i, j = np.indices((n_classes, n_classes))
    return (i - j) ** 2 / (n_classes - 1) ** 2


def qwk_from_confusion(O) -> float:
    O = np.asarray(O, dtype=np.float64)
    w = quadratic_weights(O.shape[0])
    E = np.outer(O.sum(axis=1), O.sum(axis=0))
    E *= O.sum() / E.sum()
    num = (w * O).sum()
    den = (w * E).sum()
    if den == 0:
        if num == 0:
            return 1.0
        raise ValueError("kappa undefined: zero expected disagreement with off-diagonal counts")
    return float(1.0 - num / den)


def qwk(true, pred, n_classes: int = N_CLASSES) -> float:
    """Quadratic-weighted Cohen's kappa."""
    if len(true) != len(pred):
        raise ValueError(f"true and pred differ in length: {len(true)} vs {len(pred)}")
    if len(true) < 2:
        raise ValueError("kappa needs at least two samples")
    return qwk_from_confusion(confusion_matrix(true, pred, n_classes))


def kappa_defined(true, pred) -> bool:
    """False for subsets where kappa is degenerate (fewer than two samples, or one class only)."""
    if len(true) < 2:
        return False
    return len(np.unique(np.concatenate([np.asarray(true), np.asarray(pred)]))) >= 2


@dataclass
class NormalizedConfusion:
    percent: np.ndarray
    empty: np.ndarray  # True for grades with no images; their line is left at zero
    by: str


def normalize_confusion(O, by: str = "true") -> NormalizedConfusion:
    """Express counts as percentages.

    ``by="true"`` divides each entry by the number of images of its true
    grade (columns of ``O`` sum to 100).  ``by="row"`` divides by row
    sums instead.
    """
    O = np.asarray(O, dtype=np.float64)
    if by == "true":
        totals = O.sum(axis=0)
        pct = np.divide(O * 100.0, totals[None, :], out=np.zeros_like(O), where=totals[None, :] > 0)
    elif by == "row":
        totals = O.sum(axis=1)
        pct = np.divide(O * 100.0, totals[:, None], out=np.zeros_like(O), where=totals[:, None] > 0)
    else:
        raise ValueError(f"by must be 'true' or 'row', got {by!r}")
    return NormalizedConfusion(pct, totals == 0, by)


def default_thresholds(n: int = 50, start: float = DEFAULT_FIRST_THRESHOLD,
                       stop: float = float(np.log(N_CLASSES))) -> np.ndarray:
    return np.geomspace(start, stop, n)


@dataclass
class UncertaintyCurve:
    thresholds: np.ndarray
    kappa: list            # float, or None where kappa is undefined for the subset
    size: np.ndarray       # images with u <= threshold
    cumulative: np.ndarray  # [n_thresholds, n_classes] fraction of each true grade included
    total: int = 0

    def fraction(self) -> np.ndarray:
        return self.size / max(self.total, 1)

    def kappa_at_min_fraction(self, min_fraction: float = 0.05):
        """(threshold, kappa) at the lowest threshold keeping at least ``min_fraction`` of the images."""
        for t, k, n in zip(self.thresholds, self.kappa, self.size):
            if n >= min_fraction * self.total and k is not None:
                return float(t), k
        return None, None

    def rows(self) -> list:
        out = []
        for i, t in enumerate(self.thresholds):
            out.append({"threshold": float(t), "kappa": self.kappa[i], "size": int(self.size[i]),
                        **{f"cum_grade{c}": float(self.cumulative[i, c]) for c in range(self.cumulative.shape[1])}})
        return out


def uncertainty_curve(true, pred, u, thresholds=None, n_classes: int = N_CLASSES) -> UncertaintyCurve:
    """Kappa of the subset ``{u <= threshold}`` for each threshold."""
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    u = np.asarray(u, dtype=np.float64)
    thresholds = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(thresholds) < 0):
        raise ValueError("thresholds must be ascending")
    per_grade = np.bincount(true, minlength=n_classes)
    kappas, sizes, cum = [], [], []
    for t in thresholds:
        keep = u <= t
        sizes.append(int(keep.sum()))
        if kappa_defined(true[keep], pred[keep]):
            kappas.append(qwk(true[keep], pred[keep], n_classes))
        else:
            kappas.append(None)
        counts = np.bincount(true[keep], minlength=n_classes)
        cum.append(np.divide(counts, per_grade, out=np.zeros(n_classes), where=per_grade > 0))
    return UncertaintyCurve(thresholds, kappas, np.array(sizes), np.array(cum), total=len(true))


@dataclass
class UncertaintyMatrix:
    mean: np.ndarray   # NaN where empty
    count: np.ndarray

    @property
    def empty(self) -> np.ndarray:
        return self.count == 0


def avg_uncertainty_matrix(true, pred, u, n_classes: int = N_CLASSES) -> UncertaintyMatrix:
    """Mean uncertainty per confusion-matrix cell (row = predicted, column = true)."""
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    u = np.asarray(u, dtype=np.float64)
    total = np.zeros((n_classes, n_classes))
    count = confusion_matrix(true, pred, n_classes)
    np.add.at(total, (pred, true), u)
    mean = np.divide(total, count, out=np.full_like(total, np.nan), where=count > 0)
    return UncertaintyMatrix(mean, count)
