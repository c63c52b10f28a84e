"""Fully connected feature extractor with a linear classifier head, and SGD."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad

Params = dict[str, np.ndarray]
FEATURE_ACTIVATIONS = ("relu", "linear")


@dataclass(frozen=True)
class MlpConfig:
    """Layer sizes of ``x -> hidden... -> features -> logits``.

    ``feature_dim`` is the width of the penultimate layer.  With
    ``bottleneck_average`` the penultimate activations are averaged into a
    single scalar feature before the classifier.  ``activation`` applies to
    the hidden layers; ``feature_activation`` (relu or linear) to the
    penultimate layer.
    """

    input_dim: int
    hidden_dims: tuple[int, ...]
    feature_dim: int
    num_classes: int
    bottleneck_average: bool = False
    activation: str = "relu"
    feature_activation: str = "relu"

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.feature_dim, self.num_classes)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all dimensions must be >= 1, got {dims}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.feature_activation not in FEATURE_ACTIVATIONS:
            raise ValueError(f"feature_activation must be one of {FEATURE_ACTIVATIONS}")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    @property
    def effective_feature_dim(self) -> int:
        return 1 if self.bottleneck_average else self.feature_dim

    def layer_shapes(self) -> list[tuple[str, tuple[int, int]]]:
        widths = [self.input_dim, *self.hidden_dims, self.feature_dim]
        shapes = [(f"layer{i}", (a, b)) for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
        shapes.append(("head", (self.effective_feature_dim, self.num_classes)))
        return shapes


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass
class SgdState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def init_params(config: MlpConfig, seed: int) -> Params:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, (fan_in, fan_out) in config.layer_shapes():
        bound = 1.0 / np.sqrt(fan_in)
        params[f"{name}.weight"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"{name}.bias"] = np.zeros(fan_out)
    return params


def watch(tape: ad.Tape, params: Mapping[str, np.ndarray]) -> dict[str, ad.Tensor]:
    """Register every parameter array as a leaf of ``tape``."""
    return {name: tape.leaf(value, name) for name, value in params.items()}


def forward(params, x, config: MlpConfig, return_penultimate: bool = False):
    """Run the network on a batch.

    Parameters
    ----------
    params : mapping of str to ndarray or Tensor
        Tensors returned by :func:`watch` record on the active tape; plain
        arrays are treated as constants.
    x : ndarray or Tensor, shape (N, input_dim)
    config : MlpConfig
    return_penultimate : bool
        Also return the penultimate activations before the 1-D averaging.

    Returns
    -------
    features : Tensor, shape (N, d) or (N, 1)
    logits : Tensor, shape (N, c)
    penultimate : Tensor, shape (N, feature_dim)
        Only when ``return_penultimate``.
    """
    x = ad.as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != config.input_dim:
        raise ValueError(f"expected a batch of shape (N, {config.input_dim}), got {x.shape}")
    h = x
    n_layers = len(config.hidden_dims) + 1
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, params[f"layer{i}.weight"]), params[f"layer{i}.bias"])
        if i < n_layers - 1 or config.feature_activation == "relu":
            h = ad.relu(h)
    penultimate = h
    features = ad.mean(h, axis=1) if config.bottleneck_average else h
    logits = ad.add(ad.matmul(features, params["head.weight"]), params["head.bias"])
    if return_penultimate:
        return features, logits, penultimate
    return features, logits


def sgd_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    cfg: SgdConfig,
    state: SgdState | None = None,
) -> tuple[Params, SgdState]:
    """One momentum SGD update.

    ``v <- momentum * v + g + weight_decay * theta`` then
    ``theta <- theta - lr * v``.  Returns new arrays, inputs are untouched.
    """
    state = SgdState() if state is None else state
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"missing gradients for {missing}")
    new_params: Params = {}
    new_vel: dict[str, np.ndarray] = {}
    for name, theta in params.items():
        g = grads[name] + cfg.weight_decay * theta
        v = state.velocity.get(name)
        v = g if v is None else cfg.momentum * v + g
        new_vel[name] = v
        new_params[name] = theta - cfg.learning_rate * v
    return new_params, SgdState(new_vel)


# Checkpoint CSV columns: name, shape ("3x8"), values (";"-joined, 17 significant digits,
# row-major).  One row per parameter array.
CHECKPOINT_COLUMNS = ("name", "shape", "values")


def save_checkpoint(path, params: Mapping[str, np.ndarray], config: MlpConfig | None = None) -> None:
    """One row per tensor; ``config`` adds ``meta.*`` rows for the flags
    that shapes cannot reveal."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CHECKPOINT_COLUMNS)
        if config is not None:
            writer.writerow(("meta.bottleneck_average", "", str(int(config.bottleneck_average))))
            writer.writerow(("meta.feature_activation", "", config.feature_activation))
        for name, arr in params.items():
            arr = np.asarray(arr, dtype=np.float64)
            shape = "x".join(str(s) for s in arr.shape)
            values = ";".join(f"{v:.17g}" for v in arr.reshape(-1))
            writer.writerow((name, shape, values))


def _read_checkpoint(path) -> tuple[Params, dict[str, str]]:
    params: Params = {}
    meta: dict[str, str] = {}
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CHECKPOINT_COLUMNS:
            raise ValueError(f"{path}: not a parameter checkpoint (header {header})")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            name, shape, values = row
            if name.startswith("meta."):
                meta[name[5:]] = values
                continue
            dims = tuple(int(s) for s in shape.split("x")) if shape else ()
            flat = np.array([float(v) for v in values.split(";")] if values else [], dtype=np.float64)
            if flat.size != int(np.prod(dims)):
                raise ValueError(f"{path}:{lineno}: {flat.size} values for shape {dims}")
            params[name] = flat.reshape(dims)
    return params, meta


def load_checkpoint(path) -> Params:
    return _read_checkpoint(path)[0]


def load_checkpoint_config(path) -> tuple[Params, MlpConfig]:
    """Parameters plus the network layout, including ``meta.*`` flags."""
    params, meta = _read_checkpoint(path)
    bottleneck = meta.get("bottleneck_average", "0") == "1"
    return params, config_from_params(params, bottleneck, meta.get("feature_activation", "relu"))


def config_from_params(
    params: Mapping[str, np.ndarray],
    bottleneck_average: bool = False,
    feature_activation: str = "relu",
) -> MlpConfig:
    """Recover the layer sizes of a checkpoint."""
    n = sum(1 for k in params if k.startswith("layer") and k.endswith(".weight"))
    if n == 0 or "head.weight" not in params:
        raise ValueError("checkpoint has no layer/head weights")
    shapes = [params[f"layer{i}.weight"].shape for i in range(n)]
    head_in = params["head.weight"].shape[0]
    if head_in == 1 and shapes[-1][1] > 1:
        bottleneck_average = True
    return MlpConfig(
        input_dim=shapes[0][0],
        hidden_dims=tuple(s[1] for s in shapes[:-1]),
        feature_dim=shapes[-1][1],
        num_classes=params["head.weight"].shape[1],
        bottleneck_average=bottleneck_average,
        feature_activation=feature_activation,
    )
