"""Gaussian grade probabilities, entropy uncertainty and the training loss.

The network emits a continuous score ``y_r`` and a variance ``sigma2``.  The
five grade probabilities are a discretized Gaussian centred on ``y_r``;
the predicted grade is their argmax and the uncertainty is their entropy
(in nats).

Numpy functions here are for inference and analysis; the ``*_t`` variants
build differentiable graphs for training.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

N_GRADES = 5
GRADES = np.arange(N_GRADES, dtype=np.float64)
SIGMA2_FLOOR = 1e-4
PROB_FLOOR = 1e-12
DEFAULT_ALPHA = 0.7
MAX_ENTROPY = float(np.log(N_GRADES))


def _check_sigma2(sigma2):
    s = np.asarray(sigma2, dtype=np.float64)
    # float32 network outputs can land a hair under the floor
    if np.any(s < SIGMA2_FLOOR * (1 - 1e-6)):
        raise ValueError(f"sigma2 must be >= {SIGMA2_FLOOR}, got min {s.min()}")
    return s


def gaussian_log_probs(y_r, sigma2) -> np.ndarray:
    """Log of the normalized grade probabilities, shape ``(..., 5)``."""
    y = np.asarray(y_r, dtype=np.float64)[..., None]
    s = _check_sigma2(sigma2)[..., None]
    # prefactor 1/(sqrt(2 pi) sigma^2) is common to all grades and cancels on normalization
    logp = -np.log(np.sqrt(2 * np.pi) * s) - 0.5 * (GRADES - y) ** 2 / s
    m = logp.max(axis=-1, keepdims=True)
    return logp - (m + np.log(np.exp(logp - m).sum(axis=-1, keepdims=True)))


def gaussian_probs(y_r, sigma2) -> np.ndarray:
    """Probability of each grade 0..4 under a Gaussian N(y_r, sigma2), normalized over the grades."""
    return np.exp(gaussian_log_probs(y_r, sigma2))


def entropy_uncertainty(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)


def predicted_grade(p) -> np.ndarray:
    # np.argmax keeps the first maximum, i.e. the lower grade on exact ties
    return np.argmax(np.asarray(p), axis=-1)


def loss(p, y, sigma2, alpha: float = DEFAULT_ALPHA) -> float:
    """alpha * cross-entropy(one_hot(y), p) + (1 - alpha) * sigma2 for a single prediction."""
    p = np.asarray(p, dtype=np.float64)
    if int(y) != y or not 0 <= y < N_GRADES:
        raise ValueError(f"grade must be one of 0..{N_GRADES - 1}, got {y}")
    return float(-alpha * np.log(max(p[int(y)], PROB_FLOOR)) + (1 - alpha) * sigma2)


@dataclass
class GradePrediction:
    y_r: float
    sigma2: float
    p: np.ndarray
    y_g: int
    u: float


def predict(y_r, sigma2) -> list:
    """Turn arrays of network outputs into :class:`GradePrediction` records."""
    y_r = np.atleast_1d(np.asarray(y_r, dtype=np.float64))
    sigma2 = np.atleast_1d(np.asarray(sigma2, dtype=np.float64))
    p = gaussian_probs(y_r, sigma2)
    u = entropy_uncertainty(p)
    g = predicted_grade(p)
    return [GradePrediction(float(y_r[i]), float(sigma2[i]), p[i], int(g[i]), float(u[i]))
            for i in range(len(y_r))]


# ---------------------------------------------------------------------------
# differentiable versions
# ---------------------------------------------------------------------------

def gaussian_log_probs_t(y_r: ad.Tensor, sigma2: ad.Tensor) -> ad.Tensor:
    """[B] scores and [B] variances -> [B, 5] log-probabilities."""
    b = y_r.shape[0]
    grades = ad.Tensor(np.broadcast_to(GRADES, (b, N_GRADES)))
    diff = grades - ad.reshape(y_r, (b, 1))
    s = ad.reshape(sigma2, (b, 1))
    logits = diff * diff * (-0.5) / s - ad.log(s * np.sqrt(2 * np.pi))
    return logits - ad.reshape(ad.logsumexp(logits, axis=1), (b, 1))


def loss_t(y_r: ad.Tensor, sigma2: ad.Tensor, labels, alpha: float = DEFAULT_ALPHA) -> ad.Tensor:
    """Batch mean of the loss; ``labels`` is an int array of true grades."""
    labels = np.asarray(labels, dtype=np.int64)
    b = labels.shape[0]
    logp = gaussian_log_probs_t(y_r, sigma2)
    picked = ad.clamp_min(logp[np.arange(b), labels], float(np.log(PROB_FLOOR)))
    per_item = picked * (-alpha) + sigma2 * (1 - alpha)
    return ad.mean(per_item)
