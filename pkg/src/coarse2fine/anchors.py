"""Feature-entropy estimation over fixed random anchors.

Each feature vector is assigned to one of ``e`` fixed unit anchors.  The
assignment is drawn with the Gumbel-Max trick from a categorical built from
cosine similarities, relaxed with a Gumbel-softmax for the backward pass and
made exact on the forward pass with a straight-through composition.  The
batch histogram of assignments gives a categorical feature distribution
whose Shannon entropy is the regularizer.

The categorical is ``softmax(cos / tau_sim)`` rather than the raw cosine
values, since cosines can be negative and their log undefined.  The ranking
of anchors is unchanged.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad

GUMBEL_STREAM = 0x6A6D


@dataclass(frozen=True)
class AnchorSet:
    """Fixed ``e x d`` matrix of unit-norm anchors."""

    anchors: np.ndarray
    seed: int

    def __post_init__(self):
        self.anchors.flags.writeable = False

    @property
    def e(self) -> int:
        return self.anchors.shape[0]

    @property
    def d(self) -> int:
        return self.anchors.shape[1]


@dataclass
class AssignmentDistribution:
    soft: ad.Tensor
    hard: np.ndarray
    straight_through: ad.Tensor
    noise: np.ndarray
    tau_gumbel: float
    tau_sim: float


@dataclass
class BatchFeatureDistribution:
    p: ad.Tensor
    entropy: ad.Tensor


def sample_anchors(e: int, d: int, seed: int) -> AnchorSet:
    """Uniform entries on [-1, 1] then unit rows; all-zero rows are redrawn."""
    if e < 1 or d < 1:
        raise ValueError(f"need e >= 1 and d >= 1, got e={e}, d={d}")
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1.0, 1.0, size=(e, d))
    norms = np.linalg.norm(a, axis=1)
    while np.any(norms == 0):
        bad = norms == 0
        a[bad] = rng.uniform(-1.0, 1.0, size=(int(bad.sum()), d))
        norms = np.linalg.norm(a, axis=1)
    return AnchorSet(a / norms[:, None], seed)


def standardize(r) -> ad.Tensor:
    """Center an ``N x 1`` batch and divide by its standard deviation.

    The lifted angle then depends on the shape of the feature distribution,
    not on its scale.  A constant batch maps to zeros.
    """
    r = ad.as_tensor(r)
    if r.data.ndim != 2 or r.shape[1] != 1:
        raise ValueError(f"expected an N x 1 feature batch, got {r.shape}")
    c = ad.subtract(r, ad.mean(r, axis=0))
    std = ad.exp(ad.scale(ad.log(ad.mean(ad.multiply(c, c))), 0.5))
    return ad.divide(c, std)


def lift_scalar(r) -> ad.Tensor:
    """Map scalar features ``r`` to ``(r, 1)``.

    In one dimension cosine similarity only sees the sign of ``r``.  After
    the lift the angle ``atan2(1, r)`` is strictly monotone in ``r``, so
    anchors on the unit circle split the feature line into intervals.
    """
    r = ad.as_tensor(r)
    if r.data.ndim != 2 or r.shape[1] != 1:
        raise ValueError(f"expected an N x 1 feature batch, got {r.shape}")
    return ad.concatenate([r, np.ones((r.shape[0], 1))], axis=1)


def cosine_similarities(r, anchors: AnchorSet) -> ad.Tensor:
    """``<r_n, a_i> / (||r_n|| ||a_i|| + eps)`` for unit anchors."""
    r = ad.as_tensor(r)
    if r.data.ndim != 2 or r.shape[1] != anchors.d:
        raise ValueError(f"features {r.shape} do not match anchor dim {anchors.d}")
    return ad.matmul(ad.l2_normalize(r), anchors.anchors.T)


def similarity_logits(sims, tau_sim: float = 0.1) -> ad.Tensor:
    """Per-row categorical ``softmax(sims / tau_sim)``."""
    if not tau_sim > 0:
        raise ValueError("tau_sim must be > 0")
    return ad.softmax(ad.scale(sims, 1.0 / tau_sim))


def gumbel_noise(shape, seed: int, step: int) -> np.ndarray:
    """Gumbel(0, 1) draws ``-log(-log u)``, reproducible per ``(seed, step)``.

    ``u`` is taken on the open interval (0, 1) by centring 53-bit integers.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(step), GUMBEL_STREAM]))
    k = rng.integers(0, 2**53, size=shape, dtype=np.int64)
    u = (k + 0.5) / 2.0**53
    return -np.log(-np.log(u))


def gumbel_from_uniform(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if np.any((u <= 0) | (u >= 1)):
        raise ValueError("u must lie in the open interval (0, 1)")
    return -np.log(-np.log(u))


def perturbed_scores(pi, noise) -> ad.Tensor:
    """``log(pi) + g``."""
    return ad.add(ad.log(pi), np.asarray(noise, dtype=np.float64))


def soft_assignment(pi, noise, tau_gumbel: float = 0.5) -> ad.Tensor:
    """Gumbel-softmax ``softmax((log pi + g) / tau_gumbel)``."""
    if not tau_gumbel > 0:
        raise ValueError("tau_gumbel must be > 0")
    return ad.softmax(ad.scale(perturbed_scores(pi, noise), 1.0 / tau_gumbel))


def hard_assignment(scores) -> np.ndarray:
    """One-hot rows at the argmax; the lowest index wins ties."""
    s = np.asarray(scores.data if isinstance(scores, ad.Tensor) else scores, dtype=np.float64)
    s = np.atleast_2d(s)
    out = np.zeros_like(s)
    out[np.arange(s.shape[0]), np.argmax(s, axis=1)] = 1.0
    return out


def straight_through(hard, soft) -> ad.Tensor:
    """Forward value ``hard``, gradient of ``soft``."""
    return ad.straight_through(hard, soft)


def batch_entropy(assignments) -> BatchFeatureDistribution:
    """Column mean of the assignments and its entropy ``-sum p log p``."""
    a = ad.as_tensor(assignments)
    if a.data.ndim != 2 or a.shape[0] < 1:
        raise ValueError("assignments must be a non-empty N x e matrix")
    p = ad.mean(a, axis=0)
    h = ad.scale(ad.sum_(ad.multiply(p, ad.log(p))), -1.0)
    return BatchFeatureDistribution(p, h)


def assign(r, anchors: AnchorSet, noise, tau_gumbel: float = 0.5, tau_sim: float = 0.1) -> AssignmentDistribution:
    """Full differentiable assignment of a feature batch to the anchors."""
    sims = cosine_similarities(r, anchors)
    pi = similarity_logits(sims, tau_sim)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != pi.shape:
        raise ValueError(f"noise shape {noise.shape} != {pi.shape}")
    scores = perturbed_scores(pi, noise)
    soft = ad.softmax(ad.scale(scores, 1.0 / tau_gumbel))
    hard = hard_assignment(scores)
    st = straight_through(hard, soft)
    return AssignmentDistribution(soft, hard, st, noise, tau_gumbel, tau_sim)


def feature_entropy(r, anchors: AnchorSet, noise, tau_gumbel: float = 0.5, tau_sim: float = 0.1):
    """Differentiable batch estimate of the feature entropy.

    Returns the entropy tensor (value from hard assignments, gradient along
    the Gumbel-softmax path) and the assignment details.
    """
    dist = assign(r, anchors, noise, tau_gumbel, tau_sim)
    return batch_entropy(dist.straight_through).entropy, dist


def monitor_entropy(r, anchors: AnchorSet) -> float:
    """Noise-free entropy of the cosine-argmax assignment histogram (off tape)."""
    r = np.asarray(r.data if isinstance(r, ad.Tensor) else r, dtype=np.float64)
    norms = np.linalg.norm(r, axis=1, keepdims=True)
    sims = (r / (norms + ad.NORM_EPS)) @ anchors.anchors.T
    p = hard_assignment(sims).mean(axis=0)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz))) + 0.0


def save_anchors(path, anchors: AnchorSet) -> None:
    """CSV with columns ``index, a_0 .. a_{d-1}``."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", *(f"a_{j}" for j in range(anchors.d))])
        for i, row in enumerate(anchors.anchors):
            writer.writerow([i, *(f"{v:.17g}" for v in row)])


def load_anchors(path, seed: int = -1) -> AnchorSet:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: no anchors")
    data = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    return AnchorSet(data, seed)
