"""Coarse/fine labelled datasets: synthetic generators, coarsening and CSV I/O.

Two modes:

``regression``
    scalar fine label ``z`` (age-like), two coarse classes split at a
    threshold: class 1 iff ``z < t``.
``unmixing``
    fine label is an abundance vector on the simplex, the coarse class is
    its argmax.

CSV layout: a header row, columns ``x_0 .. x_{d-1}`` followed by ``z``
(regression) or ``z_0 .. z_{m-1}`` (unmixing); values written with 17
significant digits so that export/load round-trips exactly.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SIMPLEX_TOL = 1e-6
_SPLIT_STREAM = {"train": 1, "test": 2}


@dataclass(frozen=True)
class CoarseFineDataset:
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    mode: str
    split: str = "train"
    threshold: float | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("regression", "unmixing"):
            raise ValueError(f"unknown mode {self.mode!r}")
        n = self.x.shape[0]
        if self.z.shape[0] != n or self.y.shape[0] != n:
            raise ValueError("x, z and y must have the same number of rows")
        for arr in (self.x, self.z, self.y):
            arr.flags.writeable = False

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    @property
    def num_classes(self) -> int:
        return self.y.shape[1]

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.y, axis=1)


def coarsen_threshold(z, threshold: float) -> np.ndarray:
    """One-hot of ``1[z < threshold]``: class 1 below, class 0 at or above."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    cls = (z < threshold).astype(int)
    return np.eye(2)[cls]


def coarsen_argmax(z) -> np.ndarray:
    """One-hot at the largest abundance of each simplex row (first on ties)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    check_simplex(z)
    out = np.zeros_like(z)
    out[np.arange(z.shape[0]), np.argmax(z, axis=1)] = 1.0
    return out


def simplex_violations(z, tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Indices of rows that are negative or do not sum to one."""
    z = np.atleast_2d(z)
    bad = np.any(z < -tol, axis=1) | (np.abs(z.sum(axis=1) - 1.0) > tol)
    return np.flatnonzero(bad)


def check_simplex(z, tol: float = SIMPLEX_TOL) -> None:
    bad = simplex_violations(z, tol)
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"row {i} is not on the simplex (sum={np.atleast_2d(z)[i].sum():.6g})")


def _rng(seed: int, split: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _SPLIT_STREAM[split]]))


def regression_embedding(u: np.ndarray, d_in: int, n_smooth: int, rng) -> np.ndarray:
    """Map latent ``u`` to ``d_in`` columns.

    The first ``n_smooth`` columns are ``tanh(k (u - 0.5))`` with steepness
    ``k`` spread geometrically from gentle (keeps the ordering of ``u``) to
    near-step (only tells which side of the median ``u`` is on).  The
    remaining columns are pure Gaussian nuisance.
    """
    n_smooth = min(n_smooth, d_in)
    cols = []
    if n_smooth:
        steep = np.geomspace(1.0, 40.0, n_smooth)
        cols.append(np.tanh(steep[None, :] * (u[:, None] - 0.5)))
    cols.append(rng.normal(size=(u.size, d_in - n_smooth)))
    return np.concatenate(cols, axis=1)


def gen_regression_dataset(
    n: int,
    d_in: int = 16,
    seed: int = 0,
    noise: float = 0.0,
    split: str = "train",
    threshold: float | None = None,
    n_smooth: int | None = None,
    input_noise: float = 0.1,
) -> CoarseFineDataset:
    """Synthetic coarsened regression task.

    ``u ~ U(0, 1)``, ``z = 18 + 52 u + N(0, noise^2)``.  Inputs embed ``u``
    through :func:`regression_embedding` plus ``input_noise`` Gaussian jitter;
    ``n_smooth=None`` makes every column informative and ``n_smooth < d_in``
    appends pure Gaussian nuisance columns.
    The coarse threshold defaults to the median of ``z`` (pass the training
    threshold when generating a test split).
    """
    if n < 2:
        raise ValueError("need at least 2 samples")
    rng = _rng(seed, split)
    u = rng.uniform(0.0, 1.0, size=n)
    z = 18.0 + 52.0 * u
    if noise > 0:
        z = z + rng.normal(0.0, noise, size=n)
    n_smooth = d_in if n_smooth is None else n_smooth
    x = regression_embedding(u, d_in, n_smooth, rng)
    if input_noise > 0:
        x = x + rng.normal(0.0, input_noise, size=x.shape)
    t = float(np.median(z)) if threshold is None else float(threshold)
    params = dict(generator="regression", seed=seed, noise=noise, n_smooth=n_smooth, input_noise=input_noise)
    return CoarseFineDataset(x, z, coarsen_threshold(z, t), "regression", split, t, params)


def make_endmembers(m: int, d_in: int, seed: int) -> np.ndarray:
    """Smooth positive spectra, one per row (sums of Gaussian bumps)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    grid = np.linspace(0.0, 1.0, d_in)
    while True:
        centres = rng.uniform(0.0, 1.0, size=(m, 3))
        widths = rng.uniform(0.05, 0.3, size=(m, 3))
        heights = rng.uniform(0.2, 1.0, size=(m, 3))
        bumps = heights[:, :, None] * np.exp(-0.5 * ((grid[None, None, :] - centres[:, :, None]) / widths[:, :, None]) ** 2)
        M = 0.05 + bumps.sum(axis=1)
        unit = M / np.linalg.norm(M, axis=1, keepdims=True)
        cos = unit @ unit.T
        if m == 1 or np.max(cos[~np.eye(m, dtype=bool)]) < 0.99:
            return M


def gen_unmixing_dataset(
    n: int,
    m: int = 3,
    d_in: int = 32,
    seed: int = 0,
    noise: float = 0.02,
    alpha: float = 0.8,
    split: str = "train",
) -> CoarseFineDataset:
    """Linear mixing ``x = z M + N(0, noise^2)`` with ``z ~ Dirichlet(alpha)``.

    The endmember matrix ``M`` depends on ``seed`` only, so train and test
    splits share it while drawing disjoint sample streams.
    """
    if m < 2 or d_in < m:
        raise ValueError("need m >= 2 and d_in >= m")
    M = make_endmembers(m, d_in, seed)
    rng = _rng(seed, split)
    z = rng.dirichlet(np.full(m, alpha), size=n)
    x = z @ M
    if noise > 0:
        x = x + rng.normal(0.0, noise, size=x.shape)
    params = dict(generator="unmixing", seed=seed, noise=noise, alpha=alpha, endmembers=M)
    return CoarseFineDataset(x, z, coarsen_argmax(z), "unmixing", split, None, params)


def make_splits(mode: str, n_train: int, n_test: int, seed: int, **kwargs):
    """Train and test splits from the same generator, disjoint seed streams."""
    if mode == "regression":
        train = gen_regression_dataset(n_train, seed=seed, split="train", **kwargs)
        test = gen_regression_dataset(n_test, seed=seed, split="test", threshold=train.threshold, **kwargs)
    elif mode == "unmixing":
        train = gen_unmixing_dataset(n_train, seed=seed, split="train", **kwargs)
        test = gen_unmixing_dataset(n_test, seed=seed, split="test", **kwargs)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return train, test


def export_csv(path, ds: CoarseFineDataset) -> None:
    z = ds.z.reshape(len(ds), -1)
    x_cols = [f"x_{j}" for j in range(ds.input_dim)]
    z_cols = ["z"] if ds.mode == "regression" else [f"z_{j}" for j in range(z.shape[1])]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(x_cols + z_cols)
        for xi, zi in zip(ds.x, z):
            writer.writerow([f"{v:.17g}" for v in xi] + [f"{v:.17g}" for v in zi])


def load_csv_dataset(path, mode: str | None = None, threshold: float | None = None, split: str = "train") -> CoarseFineDataset:
    """Parse a dataset CSV and apply the coarsening of ``mode``.

    ``mode`` is inferred from the header when omitted (a single ``z``
    column means regression).
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    x_idx = [i for i, h in enumerate(header) if h.startswith("x_")]
    z_idx = [i for i, h in enumerate(header) if h == "z" or h.startswith("z_")]
    if not x_idx or not z_idx or len(x_idx) + len(z_idx) != len(header):
        raise ValueError(f"{path}:1: header must be x_0..x_{{d-1}} then z or z_0..z_{{m-1}}")
    inferred = "regression" if header[z_idx[0]] == "z" else "unmixing"
    mode = inferred if mode is None else mode
    if mode != inferred:
        raise ValueError(f"{path}: header describes {inferred} data, asked for {mode}")
    if len(rows) < 2:
        raise ValueError(f"{path}: no data rows")
    values = np.empty((len(rows) - 1, len(header)))
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            values[lineno - 2] = [float(v) for v in row]
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric field") from None
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(values), axis=1))[0])
        raise ValueError(f"{path}:{bad + 2}: non-finite value")
    x = values[:, x_idx]
    if mode == "regression":
        z = values[:, z_idx[0]]
        t = float(np.median(z)) if threshold is None else float(threshold)
        return CoarseFineDataset(x, z, coarsen_threshold(z, t), mode, split, t, {"source": str(path)})
    z = values[:, z_idx]
    bad = simplex_violations(z)
    if bad.size:
        raise ValueError(f"{path}:{int(bad[0]) + 2}: abundances not on the simplex")
    return CoarseFineDataset(x, z, coarsen_argmax(z), mode, split, None, {"source": str(path)})
