"""Frozen-noise gradient audit of the full feature-entropy regularized loss.

The tape gradient is compared with central finite differences of a function
written directly in numpy (no tape).  The straight-through estimator makes
the forward loss piecewise constant in the entropy term, so finite
differences are taken of its first-order surrogate instead::

    f(theta) = CE(theta) - lam * <w, p_soft(theta)>

where ``p_soft`` is the batch mean of the Gumbel-softmax assignments and
``w = dH/dp`` is evaluated once at the hard batch histogram and frozen.  The
gradient of ``f`` at the base point is exactly the straight-through
gradient.  The audit also checks that the tape's forward value equals
``CE - lam * H(hard histogram)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import anchors as anc
from . import autodiff as ad
from . import losses, nn

REL_TOL = 1e-4
ABS_TOL = 1e-7


@dataclass
class AuditInstance:
    config: nn.MlpConfig
    params: dict
    x: np.ndarray
    y: np.ndarray
    anchors: anc.AnchorSet
    noise: np.ndarray
    lam: float
    tau_gumbel: float
    tau_sim: float


@dataclass
class AuditResult:
    index: int
    max_rel_error: float
    max_abs_error: float
    value_error: float
    n_params: int
    passed: bool


def random_instance(rng: np.random.Generator, bottleneck: bool = False, linear_features: bool = False) -> AuditInstance:
    """Two hidden layers (the second is the feature layer), all dims <= 16."""
    d_in = int(rng.integers(2, 9))
    cfg = nn.MlpConfig(
        input_dim=d_in,
        hidden_dims=(int(rng.integers(2, 17)),),
        feature_dim=int(rng.integers(2, 17)),
        num_classes=int(rng.integers(2, 5)),
        bottleneck_average=bottleneck,
        feature_activation="linear" if linear_features else "relu",
    )
    n = int(rng.integers(4, 33))
    e = int(rng.integers(2, 17))
    params = nn.init_params(cfg, int(rng.integers(2**31)))
    params = {k: v + rng.normal(0, 0.1, size=v.shape) for k, v in params.items()}
    x = rng.normal(size=(n, d_in))
    y = np.eye(cfg.num_classes)[rng.integers(0, cfg.num_classes, size=n)]
    anchor_set = anc.sample_anchors(e, 2 if bottleneck else cfg.feature_dim, int(rng.integers(2**31)))
    noise = anc.gumbel_noise((n, e), int(rng.integers(2**31)), 0)
    return AuditInstance(cfg, params, x, y, anchor_set, noise,
                         lam=float(rng.uniform(0.1, 2.0)),
                         tau_gumbel=float(rng.uniform(0.3, 1.0)),
                         tau_sim=float(rng.uniform(0.1, 0.5)))


def tape_loss_and_grad(inst: AuditInstance):
    with ad.Tape() as tape:
        leaves = nn.watch(tape, inst.params)
        feats, logits, pen = nn.forward(leaves, inst.x, inst.config, return_penultimate=True)
        ce = losses.cross_entropy(losses.softmax_probs(logits), inst.y)
        r = anc.lift_scalar(anc.standardize(feats)) if inst.config.bottleneck_average else pen
        h, _ = anc.feature_entropy(r, inst.anchors, inst.noise, inst.tau_gumbel, inst.tau_sim)
        loss = losses.fierce_loss(ce, h, inst.lam)
    return loss.item(), ad.backward(tape, loss)


# --- plain numpy reference -------------------------------------------------

def _np_softmax(a):
    z = np.exp(a - a.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _np_forward(params, x, n_layers, bottleneck, linear_features=False):
    h = x
    for i in range(n_layers):
        h = h @ params[f"layer{i}.weight"] + params[f"layer{i}.bias"]
        if i < n_layers - 1 or not linear_features:
            h = np.maximum(h, 0.0)
    if bottleneck:
        f = h.mean(axis=1, keepdims=True)
        c = f - f.mean()
        var = np.mean(c * c)
        u = c / np.sqrt(var if var > 0 else ad.LOG_EPS)
        return np.hstack([u, np.ones_like(u)]), f @ params["head.weight"] + params["head.bias"]
    return h, h @ params["head.weight"] + params["head.bias"]


def _np_pieces(inst: AuditInstance, params):
    n_layers = len(inst.config.hidden_dims) + 1
    linear = inst.config.feature_activation == "linear"
    pen, logits = _np_forward(params, inst.x, n_layers, inst.config.bottleneck_average, linear)
    q = _np_softmax(logits)
    ce = -np.mean(np.sum(inst.y * np.log(q), axis=1))
    unit = pen / (np.linalg.norm(pen, axis=1, keepdims=True) + ad.NORM_EPS)
    pi = _np_softmax(unit @ inst.anchors.anchors.T / inst.tau_sim)
    scores = np.log(np.where(pi > 0, pi, ad.LOG_EPS)) + inst.noise
    soft = _np_softmax(scores / inst.tau_gumbel)
    hard = np.zeros_like(soft)
    hard[np.arange(len(soft)), np.argmax(scores, axis=1)] = 1.0
    return ce, soft.mean(axis=0), hard.mean(axis=0)


def entropy_weights(p_hard: np.ndarray) -> np.ndarray:
    """``dH/dp`` of ``-sum p log p`` with the log shifted only at zero."""
    return np.where(p_hard > 0, -(np.log(np.where(p_hard > 0, p_hard, 1.0)) + 1.0), -np.log(ad.LOG_EPS))


def exact_entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def surrogate_loss_fn(inst: AuditInstance):
    _, _, p_hard = _np_pieces(inst, inst.params)
    w = entropy_weights(p_hard)

    def f(params):
        ce, p_soft, _ = _np_pieces(inst, params)
        return ce - inst.lam * float(w @ p_soft)

    return f


def audit_instance(inst: AuditInstance, index: int = 0, h: float = 1e-6) -> AuditResult:
    value, grads = tape_loss_and_grad(inst)
    ce, _, p_hard = _np_pieces(inst, inst.params)
    value_error = float(abs(value - (ce - inst.lam * exact_entropy(p_hard))))
    fd = ad.finite_difference_gradient(surrogate_loss_fn(inst), inst.params, h)
    max_rel = max_abs = 0.0
    ok = value_error <= 1e-10
    for name, g in grads.items():
        diff = np.abs(g - fd[name])
        scale = np.maximum(np.abs(g), np.abs(fd[name]))
        rel = np.where(scale > 0, diff / np.where(scale > 0, scale, 1.0), 0.0)
        bad = (rel > REL_TOL) & (diff > ABS_TOL)
        ok &= not np.any(bad)
        max_abs = max(max_abs, float(diff.max()))
        sizable = scale > 1e-6
        if np.any(sizable):
            max_rel = max(max_rel, float(rel[sizable].max()))
    n_params = sum(v.size for v in inst.params.values())
    return AuditResult(index, max_rel, max_abs, value_error, n_params, bool(ok))


def gradient_audit(seed: int = 0, n_instances: int = 20) -> list[AuditResult]:
    """Audit ``n_instances`` random problems.

    Instances cycle through relu features, linear features and the 1-D
    bottleneck.
    """
    rng = np.random.default_rng(seed)
    return [
        audit_instance(random_instance(rng, bottleneck=i % 3 == 2, linear_features=i % 3 == 1), i)
        for i in range(n_instances)
    ]
