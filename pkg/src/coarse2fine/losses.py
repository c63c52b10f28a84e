"""Classification criteria: cross-entropy, label smoothing, confidence penalty.

All losses are averaged over the batch and use the negative log-likelihood
sign convention (non-negative, minimized).  They accept tensors produced on
the active tape so that they can be differentiated.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad


def softmax_probs(logits, tau: float = 1.0) -> ad.Tensor:
    """Row-wise ``exp(l_i / tau) / sum_j exp(l_j / tau)``."""
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    logits = ad.as_tensor(logits)
    scaled = logits if tau == 1.0 else ad.scale(logits, 1.0 / tau)
    return ad.softmax(scaled)


def _soft_target_ce(q, targets) -> ad.Tensor:
    q = ad.as_tensor(q)
    targets = np.asarray(targets.data if isinstance(targets, ad.Tensor) else targets, dtype=np.float64)
    if targets.shape != q.shape:
        raise ValueError(f"targets {targets.shape} do not match probabilities {q.shape}")
    per_row = ad.sum_(ad.multiply(targets, ad.log(q)), axis=1)
    return ad.scale(ad.mean(per_row), -1.0)


def cross_entropy(q, y) -> ad.Tensor:
    """``-(1/N) sum_n sum_i y_ni log q_ni`` for one-hot ``y``."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=1) == 1):
        raise ValueError("y must be one-hot rows")
    return _soft_target_ce(q, y)


def smooth_labels(y, sigma: float, spread_to_all: bool = False) -> np.ndarray:
    """Uniformly smoothed targets.

    The correct class keeps ``1 - sigma`` and every other class gets
    ``sigma / (c - 1)``, so rows still sum to one.  ``spread_to_all`` selects
    the unnormalized variant ``(1 - sigma) y + sigma`` instead (others get
    ``sigma`` and the correct class ``1``); rows then sum to
    ``1 + (c - 1) sigma``.
    """
    if not 0 <= sigma < 0.5:
        raise ValueError(f"sigma must be in [0, 0.5), got {sigma}")
    y = np.asarray(y, dtype=np.float64)
    c = y.shape[1]
    if spread_to_all:
        return (1.0 - sigma) * y + sigma
    if c == 1:
        return y.copy()
    return np.where(y == 1, 1.0 - sigma, sigma / (c - 1))


def label_smoothing_loss(q, targets) -> ad.Tensor:
    """Cross-entropy against (smoothed) soft targets."""
    return _soft_target_ce(q, targets)


def output_entropy(q) -> ad.Tensor:
    """Mean Shannon entropy of the output rows, ``0 log 0 := 0``."""
    q = ad.as_tensor(q)
    return ad.scale(ad.mean(ad.sum_(ad.multiply(q, ad.log(q)), axis=1)), -1.0)


def confidence_penalty(q) -> ad.Tensor:
    """Negative mean output entropy, in ``[-ln c, 0]``; added to the loss."""
    return ad.scale(output_entropy(q), -1.0)


def fierce_loss(ce, feature_entropy, lam: float) -> ad.Tensor:
    """``ce - lam * feature_entropy``."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if lam == 0:
        return ad.as_tensor(ce)
    return ad.subtract(ce, ad.scale(feature_entropy, lam))
