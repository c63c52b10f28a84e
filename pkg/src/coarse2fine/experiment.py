"""Training runs, sweeps, feature export and the gradient audit.

Run configuration files are flat ``key = value`` text with dotted section
keys; ``#`` starts a comment.  Recognised keys (defaults in brackets)::

    dataset.mode            regression | unmixing        [regression]
    dataset.csv             training CSV path, optional (generator otherwise)
    dataset.test_csv        evaluation CSV path, optional
    dataset.n_train         [4000]
    dataset.n_test          [4000]
    dataset.input_dim       [16 regression, 32 unmixing]
    dataset.noise           fine-label noise (regression) / spectral noise (unmixing)
    dataset.alpha           Dirichlet concentration (unmixing)     [0.8]
    dataset.m               number of materials (unmixing)         [3]
    dataset.seed            generator seed                         [train.seed]
    dataset.n_smooth        informative columns (regression)       [input_dim]
    dataset.input_noise     input jitter (regression)              [0.1]
    model.hidden_dims       comma separated widths                 [32]
    model.feature_dim       penultimate width                      [16]
    model.bottleneck_average  true | false    [true regression, false unmixing]
    model.feature_activation  relu | linear   [relu regression, linear unmixing]
    criterion.name          cross_entropy | label_smoothing | confidence_penalty | fierce
    criterion.sigma         label smoothing                        [0.4]
    criterion.beta          confidence penalty weight              [0.1]
    criterion.lambda        feature entropy weight                 [0.3 regression, 0.1 unmixing]
    criterion.anchors       number of anchors e                    [75 regression, 200 unmixing]
    criterion.tau_gumbel    [0.5]
    criterion.tau_sim       [0.1]
    optim.lr / optim.momentum / optim.weight_decay                 [0.05 / 0.9 / 0]
    train.epochs            [500 regression, 200 unmixing]
    train.batch_size        [64 regression, 200 unmixing]
    train.eval_interval     [10]
    train.seed              [0]
    eval.transfer_epochs    head epochs for the transfer MSE       [100]
    eval.transfer_lr        [0.5]
    eval.reliability_bins   [15]
    eval.stability_pairs    sampled pairs per class               [2000]
    output.dir              [runs/<run id>]
"""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import anchors as anc
from . import autodiff as ad
from . import losses, metrics, nn, recovery
from .data import CoarseFineDataset, export_csv, load_csv_dataset, make_splits

CRITERIA = ("cross_entropy", "label_smoothing", "confidence_penalty", "fierce")

METRIC_COLUMNS = (
    "run_id", "criterion", "epoch", "train_loss", "ce_loss", "accuracy",
    "entropy_ref", "entropy_anchor", "recovery_mse", "raw_mse", "transfer_mse",
    "ece", "mce", "mi_proxy", "stability",
)
RECOVERY_COLUMNS = ("criterion", "epoch", "alpha", "orientation", "mse", "baseline_mse")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class DatasetSpec:
    mode: str = "regression"
    csv: str | None = None
    test_csv: str | None = None
    n_train: int = 4000
    n_test: int = 4000
    input_dim: int | None = None
    noise: float | None = None
    alpha: float = 0.8
    m: int = 3
    seed: int | None = None
    n_smooth: int | None = None
    input_noise: float | None = None


@dataclass
class ModelSpec:
    hidden_dims: tuple[int, ...] = (32,)
    feature_dim: int = 16
    bottleneck_average: bool | None = None
    feature_activation: str | None = None


@dataclass
class CriterionSpec:
    name: str = "cross_entropy"
    sigma: float = 0.4
    beta: float = 0.1
    lam: float | None = None
    anchors: int | None = None
    tau_gumbel: float = 0.5
    tau_sim: float = 0.1


@dataclass
class TrainSpec:
    epochs: int | None = None
    batch_size: int | None = None
    eval_interval: int = 10
    seed: int = 0


@dataclass
class EvalSpec:
    transfer_epochs: int = 100
    transfer_lr: float = 0.5
    reliability_bins: int = 15
    stability_pairs: int = 2000


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    criterion: CriterionSpec = field(default_factory=CriterionSpec)
    optim: nn.SgdConfig = field(default_factory=lambda: nn.SgdConfig(learning_rate=0.05))
    train: TrainSpec = field(default_factory=TrainSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    out_dir: str | None = None

    def resolved(self) -> "RunConfig":
        """Copy with mode-dependent defaults filled in."""
        reg = self.dataset.mode == "regression"
        ds = dataclasses.replace(
            self.dataset,
            input_dim=self.dataset.input_dim if self.dataset.input_dim is not None else (16 if reg else 32),
            noise=self.dataset.noise if self.dataset.noise is not None else (0.0 if reg else 0.02),
            seed=self.dataset.seed if self.dataset.seed is not None else self.train.seed,
        )
        model = dataclasses.replace(
            self.model,
            bottleneck_average=reg if self.model.bottleneck_average is None else self.model.bottleneck_average,
            feature_activation=self.model.feature_activation or ("relu" if reg else "linear"),
        )
        crit = dataclasses.replace(
            self.criterion,
            lam=self.criterion.lam if self.criterion.lam is not None else (0.3 if reg else 0.1),
            anchors=self.criterion.anchors if self.criterion.anchors is not None else (75 if reg else 200),
        )
        tr = dataclasses.replace(
            self.train,
            epochs=self.train.epochs if self.train.epochs is not None else (500 if reg else 200),
            batch_size=self.train.batch_size if self.train.batch_size is not None else (64 if reg else 200),
        )
        cfg = dataclasses.replace(self, dataset=ds, model=model, criterion=crit, train=tr)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.dataset.mode not in ("regression", "unmixing"):
            raise ValueError(f"unknown dataset mode {self.dataset.mode!r}")
        if self.model.feature_activation not in (None, *nn.FEATURE_ACTIVATIONS):
            raise ValueError(f"model.feature_activation must be one of {nn.FEATURE_ACTIVATIONS}")
        if self.criterion.name not in CRITERIA:
            raise ValueError(f"unknown criterion {self.criterion.name!r}")
        if self.criterion.lam is not None and self.criterion.lam < 0:
            raise ValueError("criterion.lambda must be >= 0")
        if self.criterion.anchors is not None and self.criterion.anchors < 1:
            raise ValueError("criterion.anchors must be >= 1")
        if self.train.epochs is not None and self.train.epochs < 0:
            raise ValueError("train.epochs must be >= 0")
        if self.train.batch_size is not None and self.train.batch_size < 1:
            raise ValueError("train.batch_size must be >= 1")
        if self.train.eval_interval < 1:
            raise ValueError("train.eval_interval must be >= 1")

    @property
    def run_id(self) -> str:
        c = self.criterion
        tag = {
            "cross_entropy": "ce",
            "label_smoothing": f"ls{c.sigma:g}",
            "confidence_penalty": f"cp{c.beta:g}",
            "fierce": f"fierce{c.lam:g}_e{c.anchors}",
        }[c.name]
        return f"{self.dataset.mode}_{tag}_s{self.train.seed}"


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.replace(" ", "").split(",") if v)


# key -> (section attribute, field name, parser)
_KEYS = {
    "dataset.mode": ("dataset", "mode", str),
    "dataset.csv": ("dataset", "csv", str),
    "dataset.test_csv": ("dataset", "test_csv", str),
    "dataset.n_train": ("dataset", "n_train", int),
    "dataset.n_test": ("dataset", "n_test", int),
    "dataset.input_dim": ("dataset", "input_dim", int),
    "dataset.noise": ("dataset", "noise", float),
    "dataset.alpha": ("dataset", "alpha", float),
    "dataset.m": ("dataset", "m", int),
    "dataset.seed": ("dataset", "seed", int),
    "dataset.n_smooth": ("dataset", "n_smooth", int),
    "dataset.input_noise": ("dataset", "input_noise", float),
    "model.hidden_dims": ("model", "hidden_dims", _ints),
    "model.feature_dim": ("model", "feature_dim", int),
    "model.bottleneck_average": ("model", "bottleneck_average", _bool),
    "model.feature_activation": ("model", "feature_activation", str),
    "criterion.name": ("criterion", "name", str),
    "criterion.sigma": ("criterion", "sigma", float),
    "criterion.beta": ("criterion", "beta", float),
    "criterion.lambda": ("criterion", "lam", float),
    "criterion.anchors": ("criterion", "anchors", int),
    "criterion.tau_gumbel": ("criterion", "tau_gumbel", float),
    "criterion.tau_sim": ("criterion", "tau_sim", float),
    "optim.lr": ("optim", "learning_rate", float),
    "optim.momentum": ("optim", "momentum", float),
    "optim.weight_decay": ("optim", "weight_decay", float),
    "train.epochs": ("train", "epochs", int),
    "train.batch_size": ("train", "batch_size", int),
    "train.eval_interval": ("train", "eval_interval", int),
    "train.seed": ("train", "seed", int),
    "eval.transfer_epochs": ("eval", "transfer_epochs", int),
    "eval.transfer_lr": ("eval", "transfer_lr", float),
    "eval.reliability_bins": ("eval", "reliability_bins", int),
    "eval.stability_pairs": ("eval", "stability_pairs", int),
    "output.dir": (None, "out_dir", str),
}


def apply_overrides(cfg: RunConfig, items: dict[str, str]) -> RunConfig:
    for key, raw in items.items():
        if key not in _KEYS:
            raise KeyError(f"unknown config key {key!r}")
        section, name, parse = _KEYS[key]
        value = parse(raw)
        if section is None:
            cfg = dataclasses.replace(cfg, **{name: value})
        else:
            sub = dataclasses.replace(getattr(cfg, section), **{name: value})
            cfg = dataclasses.replace(cfg, **{section: sub})
    return cfg


def parse_config_text(text: str) -> RunConfig:
    items = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        items[key] = value
    return apply_overrides(RunConfig(), items)


def load_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text())


def format_config(cfg: RunConfig) -> str:
    lines = []
    for key, (section, name, _) in _KEYS.items():
        obj = cfg if section is None else getattr(cfg, section)
        value = getattr(obj, name)
        if value is None:
            continue
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# data / model plumbing
# --------------------------------------------------------------------------

def build_datasets(cfg: RunConfig) -> tuple[CoarseFineDataset, CoarseFineDataset]:
    ds = cfg.dataset
    if ds.csv:
        train = load_csv_dataset(ds.csv, ds.mode)
        test = load_csv_dataset(ds.test_csv, ds.mode, threshold=train.threshold, split="test") if ds.test_csv else train
        return train, test
    if ds.mode == "regression":
        extra = {k: v for k, v in (("n_smooth", ds.n_smooth), ("input_noise", ds.input_noise)) if v is not None}
        return make_splits("regression", ds.n_train, ds.n_test, ds.seed, d_in=ds.input_dim, noise=ds.noise, **extra)
    return make_splits("unmixing", ds.n_train, ds.n_test, ds.seed, m=ds.m, d_in=ds.input_dim, noise=ds.noise, alpha=ds.alpha)


def entropy_features(features, penultimate, mcfg: nn.MlpConfig):
    """Features seen by the anchor estimator: standardized, lifted scalars in bottleneck mode."""
    return anc.lift_scalar(anc.standardize(features)) if mcfg.bottleneck_average else penultimate


def anchor_dim(mcfg: nn.MlpConfig) -> int:
    return 2 if mcfg.bottleneck_average else mcfg.feature_dim


def build_model_config(cfg: RunConfig, train: CoarseFineDataset) -> nn.MlpConfig:
    return nn.MlpConfig(
        input_dim=train.input_dim,
        hidden_dims=cfg.model.hidden_dims,
        feature_dim=cfg.model.feature_dim,
        num_classes=train.num_classes,
        bottleneck_average=cfg.model.bottleneck_average,
        feature_activation=cfg.model.feature_activation,
    )


def batch_loss(params, x, y, mcfg: nn.MlpConfig, crit: CriterionSpec, anchor_set, noise):
    """Training criterion on one batch; returns the loss tensor."""
    feats, logits, pen = nn.forward(params, x, mcfg, return_penultimate=True)
    q = losses.softmax_probs(logits)
    if crit.name == "label_smoothing":
        return losses.label_smoothing_loss(q, losses.smooth_labels(y, crit.sigma))
    ce = losses.cross_entropy(q, y)
    if crit.name == "cross_entropy":
        return ce
    if crit.name == "confidence_penalty":
        return ad.add(ce, ad.scale(losses.confidence_penalty(q), crit.beta))
    h, _ = anc.feature_entropy(entropy_features(feats, pen, mcfg), anchor_set, noise, crit.tau_gumbel, crit.tau_sim)
    return losses.fierce_loss(ce, h, crit.lam)


def evaluate_arrays(params, x, mcfg: nn.MlpConfig):
    feats, logits, pen = nn.forward(params, x, mcfg, return_penultimate=True)
    q = losses.softmax_probs(logits).data
    return feats.data, q, pen.data


def chunked_monitor_entropy(features, anchor_set, batch_size: int) -> float:
    """Mean monitor entropy over consecutive batches of the evaluation set."""
    n = features.shape[0]
    vals = [anc.monitor_entropy(features[s:s + batch_size], anchor_set) for s in range(0, n, batch_size)]
    return float(np.mean(vals))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


@dataclass
class RunResult:
    out_dir: Path
    rows: list[dict]
    params: dict
    recovery_rows: list[dict]


def _evaluate(cfg, params, mcfg, train, test, anchor_set, epoch, train_loss):
    feats, q, pen = evaluate_arrays(params, test.x, mcfg)
    row = dict.fromkeys(METRIC_COLUMNS)
    row.update(run_id=cfg.run_id, criterion=cfg.criterion.name, epoch=epoch, train_loss=train_loss)
    row["ce_loss"] = losses.cross_entropy(q, test.y).item()
    pred = np.argmax(q, axis=1)
    row["accuracy"] = float(np.mean(pred == test.labels))
    row["entropy_anchor"] = chunked_monitor_entropy(ad.as_tensor(entropy_features(feats, pen, mcfg)).data, anchor_set, cfg.train.batch_size)
    bins = metrics.reliability(q, test.y, cfg.eval.reliability_bins)
    row["ece"] = metrics.ece(bins)
    row["mce"] = metrics.mce(bins)
    row["mi_proxy"] = metrics.mutual_info_proxy(q)
    row["stability"] = metrics.stability(q, test.y, cfg.eval.stability_pairs, seed=cfg.train.seed)
    rec = None
    if feats.shape[1] == 1:
        row["entropy_ref"] = metrics.reference_feature_entropy(feats)
    if test.mode == "regression":
        f1 = feats[:, 0] if feats.shape[1] == 1 else feats.mean(axis=1)
        cm = recovery.class_mean_predictions(test.z, pred, test.num_classes)
        rec = recovery.select_orientation_and_alpha(f1, test.z, cm, fine_marginal=train.z)
        row["recovery_mse"] = rec.mse
    else:
        row["raw_mse"] = recovery.raw_mse(q, test.z)
        if cfg.eval.transfer_epochs > 0:
            train_feats = evaluate_arrays(params, train.x, mcfg)[0]
            row["transfer_mse"] = recovery.transfer_mse(
                train_feats, train.z, cfg.eval.transfer_epochs, cfg.eval.transfer_lr,
                eval_features=feats, eval_z=test.z, batch_size=cfg.train.batch_size, seed=cfg.train.seed,
            )
    for k, v in row.items():
        if isinstance(v, float) and not math.isfinite(v):
            raise TrainingDiverged(f"metric {k} is not finite at epoch {epoch}")
    return row, rec, bins, feats


def run_train(cfg: RunConfig, out_dir=None, write: bool = True) -> RunResult:
    """Train one model and record metrics every ``eval_interval`` epochs.

    Writes ``metrics.csv``, ``reliability.csv``, ``checkpoint.csv``,
    ``anchors.csv``, ``features.csv``, ``config.txt`` and, in regression
    mode, ``recovery.csv`` under the run directory.
    """
    cfg = cfg.resolved()
    out = Path(out_dir or cfg.out_dir or Path("runs") / cfg.run_id)
    train, test = build_datasets(cfg)
    if cfg.train.batch_size > len(train):
        raise ValueError("batch size exceeds the training set size")
    mcfg = build_model_config(cfg, train)
    seed = cfg.train.seed
    params = nn.init_params(mcfg, seed)
    anchor_set = anc.sample_anchors(cfg.criterion.anchors, anchor_dim(mcfg), seed)
    state = nn.SgdState()
    bs = cfg.train.batch_size
    n = len(train)
    rows, rec_rows = [], []

    def record(epoch, train_loss):
        row, rec, bins, feats = _evaluate(cfg, params, mcfg, train, test, anchor_set, epoch, train_loss)
        rows.append(row)
        if rec is not None:
            rec_rows.append(dict(criterion=cfg.criterion.name, epoch=epoch, alpha=rec.alpha,
                                 orientation=rec.orientation, mse=rec.mse, baseline_mse=rec.baseline_mse))
        return bins, feats

    bins, feats = record(0, None)
    step = 0
    for epoch in range(1, cfg.train.epochs + 1):
        perm = np.random.default_rng(np.random.SeedSequence([seed, epoch, 0x5F])).permutation(n)
        total = 0.0
        n_batches = 0
        for b, start in enumerate(range(0, n - bs + 1, bs)):
            idx = perm[start:start + bs]
            noise = anc.gumbel_noise((bs, cfg.criterion.anchors), seed, step) if cfg.criterion.name == "fierce" else None
            try:
                with ad.Tape() as tape:
                    leaves = nn.watch(tape, params)
                    loss = batch_loss(leaves, train.x[idx], train.y[idx], mcfg, cfg.criterion, anchor_set, noise)
                grads = ad.backward(tape, loss)
            except FloatingPointError as err:
                norms = {k: float(np.linalg.norm(v)) for k, v in params.items()}
                raise TrainingDiverged(f"non-finite value at epoch {epoch}, batch {b}: {err}; parameter norms {norms}") from err
            params, state = nn.sgd_step(params, grads, cfg.optim, state)
            total += loss.item()
            n_batches += 1
            step += 1
        if epoch % cfg.train.eval_interval == 0 or epoch == cfg.train.epochs:
            bins, feats = record(epoch, total / max(n_batches, 1))

    if write:
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "metrics.csv", METRIC_COLUMNS, rows)
        if rec_rows:
            write_rows(out / "recovery.csv", RECOVERY_COLUMNS, rec_rows)
        metrics.save_reliability(out / "reliability.csv", bins)
        nn.save_checkpoint(out / "checkpoint.csv", params, mcfg)
        anc.save_anchors(out / "anchors.csv", anchor_set)
        write_features(out / "features.csv", feats, test)
        (out / "config.txt").write_text(format_config(cfg))
    return RunResult(out, rows, params, rec_rows)


def write_rows(path, columns, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in columns])


def read_rows(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_features(path, feats: np.ndarray, ds: CoarseFineDataset) -> None:
    """CSV: ``sample, f_0..f_{d-1}, z (or z_0..), coarse``."""
    z = ds.z.reshape(len(ds), -1)
    z_cols = ["z"] if ds.mode == "regression" else [f"z_{j}" for j in range(z.shape[1])]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", *(f"f_{j}" for j in range(feats.shape[1])), *z_cols, "coarse"])
        for i in range(len(ds)):
            writer.writerow([i, *(_fmt(v) for v in feats[i]), *(_fmt(v) for v in z[i]), int(ds.labels[i])])


def export_features(checkpoint, data, out_path) -> np.ndarray:
    """Forward features of every sample of a dataset CSV through a checkpoint."""
    params, mcfg = nn.load_checkpoint_config(checkpoint)
    ds = load_csv_dataset(data)
    if mcfg.input_dim != ds.input_dim:
        raise ValueError(f"checkpoint expects {mcfg.input_dim} inputs, data has {ds.input_dim}")
    if mcfg.num_classes != ds.num_classes:
        raise ValueError(f"checkpoint has {mcfg.num_classes} classes, data has {ds.num_classes}")
    feats = evaluate_arrays(params, ds.x, mcfg)[0]
    write_features(out_path, feats, ds)
    return feats


SWEEP_AXES = {"lambda": "criterion.lambda", "anchors": "criterion.anchors", "sigma": "criterion.sigma"}
SUMMARY_COLUMNS = ("value", "final_mse", "min_mse", "final_accuracy", "final_raw_mse", "final_transfer_mse")


def run_metric(rows: list[dict], mode: str) -> list[float]:
    """The headline MSE series of a run: OT recovery or transfer MSE."""
    key = "recovery_mse" if mode == "regression" else "transfer_mse"
    return [float(r[key]) for r in rows if r.get(key) not in (None, "")]


def run_sweep(base: RunConfig, axis: str, values, out_dir=None) -> list[dict]:
    """One run per grid value with the seed held fixed; writes ``summary.csv``."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {sorted(SWEEP_AXES)}")
    values = list(values)
    if not values:
        raise ValueError("empty grid")
    base = base.resolved()
    out = Path(out_dir or base.out_dir or Path("runs") / f"sweep_{axis}")
    crit = {"lambda": "fierce", "anchors": "fierce", "sigma": "label_smoothing"}[axis]
    summary = []
    for v in values:
        cfg = apply_overrides(base, {SWEEP_AXES[axis]: str(v), "criterion.name": crit})
        res = run_train(cfg, out / f"{axis}_{v}")
        series = run_metric(res.rows, cfg.dataset.mode)
        last = res.rows[-1]
        summary.append(dict(
            value=v, final_mse=series[-1], min_mse=min(series), final_accuracy=last["accuracy"],
            final_raw_mse=last.get("raw_mse"), final_transfer_mse=last.get("transfer_mse"),
        ))
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "summary.csv", SUMMARY_COLUMNS, summary)
    return summary
