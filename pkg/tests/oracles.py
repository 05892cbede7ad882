"""Independent reference computations shared by the unit and acceptance tests."""
import numpy as np
from scipy.stats import rankdata

Z99 = 2.576


def permutation_kw_pvalue(groups, n_perm, rng):
    """Monte-Carlo p-value of the Kruskal-Wallis H by shuffling the pooled ranks.

    Written against the textbook formula so it shares no code with the
    package: H = 12/(n(n+1)) sum R_i^2/n_i - 3(n+1), divided by the tie
    correction.
    """
    pooled = np.concatenate([np.asarray(g, dtype=float) for g in groups])
    n = len(pooled)
    sizes = np.array([len(g) for g in groups])
    ranks = rankdata(pooled)
    _, counts = np.unique(pooled, return_counts=True)
    correction = 1 - (counts ** 3 - counts).sum() / (n ** 3 - n)
    cuts = np.concatenate([[0], np.cumsum(sizes)])

    def h(r):
        s = sum(r[..., cuts[i]:cuts[i + 1]].sum(axis=-1) ** 2 / sizes[i] for i in range(len(sizes)))
        return (12 / (n * (n + 1)) * s - 3 * (n + 1)) / correction

    observed = h(ranks)
    shuffled = ranks[np.argsort(rng.random((n_perm, n)), axis=1)]
    return float(np.mean(h(shuffled) >= observed * (1 - 1e-12) - 1e-12)), float(observed)


def mc_band(p, n_perm, z=Z99):
    return z * np.sqrt(p * (1 - p) / n_perm)


def small_kw_fixtures(count=20, seed=2024):
    """Two or three groups of 3-5 small integers, so ties are common."""
    rng = np.random.default_rng(seed)
    out = []
    for f in range(count):
        k = int(rng.integers(2, 4))
        out.append([rng.integers(0, 6, int(rng.integers(3, 6))) + (f % 3) * i for i in range(k)])
    return out


def pairwise_kappa(true, pred, n_classes=5):
    """Quadratic kappa from pairwise sums; never forms a confusion matrix.

    Observed disagreement averages w over matched pairs, chance disagreement
    averages w over all (pred_k, true_l) pairs.
    """
    n = len(true)
    w = lambda a, b: (a - b) ** 2 / (n_classes - 1) ** 2
    observed = sum(w(p, t) for p, t in zip(pred, true))
    chance = sum(w(p, t) for p in pred for t in true) / n
    return 1.0 - observed / chance
