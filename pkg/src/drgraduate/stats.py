"""Kruskal-Wallis H test and Cohen's d."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special
from scipy.stats import rankdata

# |d| lower bounds and their labels
EFFECT_LABELS = (
    (2.0, "huge"),
    (1.3, "very large"),
    (0.8, "large"),
    (0.5, "medium"),
    (0.2, "small"),
    (0.0, "very small"),
)


KW_METHODS = ("chi2", "exact")
MAX_EXACT_ASSIGNMENTS = 5_000_000


@dataclass
class KWResult:
    H: float
    dof: int
    p_value: float
    method: str = "chi2"


@dataclass
class EffectSize:
    d: float
    pooled_S: float
    label: str


def chi2_sf(x: float, dof: int) -> float:
    """Upper tail of the chi-square distribution via the regularized incomplete gamma."""
    if x <= 0:
        return 1.0
    return float(special.gammaincc(dof / 2.0, x / 2.0))


def _prepare(groups):
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(groups) < 2:
        raise ValueError("need at least two groups")
    if any(len(g) == 0 for g in groups):
        raise ValueError("every group needs at least one sample")
    sizes = np.array([len(g) for g in groups])
    n = int(sizes.sum())
    if n < 5:
        raise ValueError(f"need at least 5 samples in total, got {n}")
    pooled = np.concatenate(groups)
    _, tie_counts = np.unique(pooled, return_counts=True)
    correction = 1.0 - (tie_counts ** 3 - tie_counts).sum() / (n ** 3 - n)
    return rankdata(pooled), sizes, n, correction


def _h_from_score(score, n, correction):
    """H from ``sum(R_i**2 / n_i)``."""
    return (12.0 / (n * (n + 1)) * score - 3.0 * (n + 1)) / correction


def kruskal_wallis(groups, method: str = "chi2") -> KWResult:
    """Rank-based H statistic with tie correction.

    ``method="chi2"`` takes the p-value from the chi-square tail with k-1
    degrees of freedom (the large-sample approximation).  ``"exact"``
    enumerates every assignment of the pooled ranks to groups of the
    observed sizes; it is meant for small samples, where the chi-square
    tail is poor.
    """
    if method not in KW_METHODS:
        raise ValueError(f"method must be one of {KW_METHODS}, got {method!r}")
    ranks, sizes, n, correction = _prepare(groups)
    dof = len(sizes) - 1
    if correction == 0:
        # every value identical
        return KWResult(0.0, dof, 1.0, method)
    bounds = np.cumsum(sizes)[:-1]
    score = sum(r.sum() ** 2 / len(r) for r in np.split(ranks, bounds))
    H = max(_h_from_score(score, n, correction), 0.0)
    if method == "chi2":
        return KWResult(float(H), dof, chi2_sf(H, dof), method)
    scores = _all_scores(ranks, tuple(int(s) for s in sizes))
    # relative slack absorbs summation-order rounding between equal scores
    p = float(np.mean(scores >= score * (1 - 1e-12)))
    return KWResult(float(H), dof, p, method)


def _assignment_count(sizes) -> int:
    count, left = 1, sum(sizes)
    for s in sizes:
        count *= math.comb(left, s)
        left -= s
    return count


@lru_cache(maxsize=64)
def _combos(m: int, k: int) -> np.ndarray:
    return np.array(list(itertools.combinations(range(m), k)), dtype=np.int64).reshape(-1, k)


def _all_scores(ranks: np.ndarray, sizes: tuple) -> np.ndarray:
    """``sum(R_i**2 / n_i)`` for every way of splitting ``ranks`` into groups of ``sizes``."""
    total = _assignment_count(sizes)
    if total > MAX_EXACT_ASSIGNMENTS:
        raise ValueError(f"exact test would enumerate {total} assignments (limit {MAX_EXACT_ASSIGNMENTS})")
    if len(sizes) == 1:
        return np.array([ranks.sum() ** 2 / sizes[0]])
    if len(sizes) == 2:
        sums = ranks[_combos(len(ranks), sizes[0])].sum(axis=1)
        return sums ** 2 / sizes[0] + (ranks.sum() - sums) ** 2 / sizes[1]
    out = []
    for combo in _combos(len(ranks), sizes[0]):
        rest = np.delete(ranks, combo)
        out.append(ranks[combo].sum() ** 2 / sizes[0] + _all_scores(rest, sizes[1:]))
    return np.concatenate(out)


def effect_label(d: float) -> str:
    mag = abs(d)
    for bound, label in EFFECT_LABELS:
        if mag >= bound:
            return label
    return EFFECT_LABELS[-1][1]


def cohens_d(a, b) -> EffectSize:
    """Standardized mean difference (mean(a) - mean(b)) / pooled standard deviation."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    n1, n2 = len(a), len(b)
    if n1 < 2 or n2 < 2:
        raise ValueError("each group needs at least two samples")
    s1, s2 = a.var(ddof=1), b.var(ddof=1)
    S = math.sqrt(((n1 - 1) * s1 + (n2 - 1) * s2) / (n1 + n2 - 2))
    diff = a.mean() - b.mean()
    if S == 0:
        d = 0.0 if diff == 0 else math.copysign(math.inf, diff)
    else:
        d = diff / S
    return EffectSize(float(d), S, effect_label(d))


REPORT_FIELDS = ("group_a", "group_b", "n_a", "n_b", "H", "p", "d", "label")


def compare_groups(name_a: str, a, name_b: str, b) -> dict:
    """One report row: Kruskal-Wallis between the two groups plus Cohen's d."""
    kw = kruskal_wallis([a, b])
    es = cohens_d(a, b)
    return {"group_a": name_a, "group_b": name_b, "n_a": len(a), "n_b": len(b),
            "H": kw.H, "p": kw.p_value, "d": es.d, "label": es.label}
