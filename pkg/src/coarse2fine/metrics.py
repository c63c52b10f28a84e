"""Output-distribution and feature-space diagnostics.

Calibration (reliability bins, ECE, MCE), an entropy proxy for the
input/output mutual information, within-class stability, a histogram
entropy of 1-D features and Pearson correlation for entropy traces.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad


def _arr(a) -> np.ndarray:
    return np.asarray(a.data if isinstance(a, ad.Tensor) else a, dtype=np.float64)


@dataclass(frozen=True)
class ReliabilityBins:
    edges: np.ndarray
    counts: np.ndarray
    confidence: np.ndarray
    accuracy: np.ndarray

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def gaps(self) -> np.ndarray:
        return np.abs(self.accuracy - self.confidence)


def reliability(q, y, n_bins: int = 15) -> ReliabilityBins:
    """Bin samples by max-probability confidence on ``n_bins`` equal bins.

    Bin ``b`` covers ``(edges[b], edges[b+1]]`` with the first bin also
    holding confidence 0.  Empty bins report zero confidence and accuracy.
    """
    if n_bins < 1:
        raise ValueError("need at least one bin")
    q = _arr(q)
    y = _arr(y)
    conf = q.max(axis=1)
    correct = (np.argmax(q, axis=1) == np.argmax(y, axis=1)).astype(float)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    safe = np.maximum(counts, 1)
    mean_conf = np.bincount(idx, weights=conf, minlength=n_bins) / safe
    acc = np.bincount(idx, weights=correct, minlength=n_bins) / safe
    return ReliabilityBins(edges, counts, mean_conf, acc)


def ece(bins: ReliabilityBins) -> float:
    """Count-weighted mean of ``|accuracy - confidence|``."""
    if bins.n == 0:
        raise ValueError("all bins are empty")
    return float(np.sum(bins.counts / bins.n * bins.gaps))


def mce(bins: ReliabilityBins) -> float:
    """Largest ``|accuracy - confidence|`` over non-empty bins."""
    if bins.n == 0:
        raise ValueError("all bins are empty")
    return float(np.max(bins.gaps[bins.counts > 0]))


def save_reliability(path, bins: ReliabilityBins) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count", "conf", "acc"])
        for b in range(bins.counts.size):
            writer.writerow([
                f"{bins.edges[b]:.17g}", f"{bins.edges[b + 1]:.17g}", int(bins.counts[b]),
                f"{bins.confidence[b]:.17g}", f"{bins.accuracy[b]:.17g}",
            ])


def discrete_entropy(labels) -> float:
    _, counts = np.unique(np.asarray(labels), return_counts=True, axis=0)
    f = counts / counts.sum()
    return float(-np.sum(f * np.log(f))) + 0.0


def mutual_info_proxy(q, n_conf_bins: int = 10) -> float:
    """Entropy of the discretized outputs ``(argmax class, confidence bin)``.

    For a deterministic network on distinct inputs the mutual information
    between input and discretized output reduces to the output entropy.
    This is a proxy, not an estimator of the continuous quantity.
    """
    q = _arr(q)
    cls = np.argmax(q, axis=1)
    conf_bin = np.minimum((q.max(axis=1) * n_conf_bins).astype(int), n_conf_bins - 1)
    return discrete_entropy(cls * n_conf_bins + conf_bin)


def stability(q, y, pairs_per_class: int | None = None, seed: int = 0) -> float:
    """One minus the mean within-class total-variation distance of outputs.

    Pairs are drawn within each true class; with ``pairs_per_class=None``
    (or at least as many as exist) every unordered pair is used.  Classes
    with fewer than two samples are skipped with a warning.
    """
    q = _arr(q)
    labels = np.argmax(_arr(y), axis=1)
    rng = np.random.default_rng(seed)
    per_class = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        n = members.size
        if n < 2:
            warnings.warn(f"class {c} has fewer than 2 samples, skipped")
            continue
        total = n * (n - 1) // 2
        if pairs_per_class is None or pairs_per_class >= total:
            i, j = np.triu_indices(n, k=1)
        else:
            i = rng.integers(0, n, size=pairs_per_class)
            j = (i + rng.integers(1, n, size=pairs_per_class)) % n
        tv = 0.5 * np.abs(q[members[i]] - q[members[j]]).sum(axis=1)
        per_class.append(1.0 - tv.mean())
    if not per_class:
        raise ValueError("no class has two samples")
    return float(np.mean(per_class))


def reference_feature_entropy(features, n_bins: int = 64) -> float:
    """Histogram entropy of scalar features over ``[min, max]``."""
    f = _arr(features).reshape(-1)
    lo, hi = f.min(), f.max()
    if hi <= lo:
        return 0.0
    counts, _ = np.histogram(f, bins=n_bins, range=(lo, hi))
    p = counts[counts > 0] / f.size
    return float(-np.sum(p * np.log(p)))


def pearson_correlation(a, b) -> float:
    a = _arr(a).reshape(-1)
    b = _arr(b).reshape(-1)
    if a.size != b.size or a.size < 2:
        raise ValueError("need two series of equal length >= 2")
    da = a - a.mean()
    db = b - b.mean()
    va = np.sum(da * da)
    vb = np.sum(db * db)
    if va == 0 or vb == 0:
        raise ValueError("zero variance series")
    return float(np.clip(np.sum(da * db) / np.sqrt(va * vb), -1.0, 1.0))


def minmax_rescale(series) -> np.ndarray:
    s = np.asarray(series, dtype=np.float64)
    lo, hi = s.min(), s.max()
    return np.zeros_like(s) if hi == lo else (s - lo) / (hi - lo)


@dataclass(frozen=True)
class EntropyTrace:
    """Reference vs anchor entropy per epoch, each min-max rescaled to [0, 1]."""

    epochs: np.ndarray
    reference: np.ndarray
    anchor: np.ndarray

    @classmethod
    def from_raw(cls, epochs, reference, anchor) -> "EntropyTrace":
        if len(reference) != len(anchor) or len(epochs) != len(anchor):
            raise ValueError("series must have equal length")
        return cls(np.asarray(epochs), minmax_rescale(reference), minmax_rescale(anchor))

    def correlation(self) -> float:
        return pearson_correlation(self.reference, self.anchor)
