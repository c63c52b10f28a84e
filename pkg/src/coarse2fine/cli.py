"""Command line entry point: ``python -m coarse2fine <command>``.

Commands::

    train            --config PATH [--set key=value ...] [--out DIR]
    sweep            --config PATH --axis {lambda,anchors,sigma} --values LIST [--out DIR]
    export-features  --checkpoint PATH --data PATH [--out DIR]
    gradcheck        [--seed S] [--instances K] [--out DIR]

Exit status is 0 on success, 1 on a failed gradient audit and 2 on any
error (with a one-line diagnostic on stderr).
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import audit, experiment


def _overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _load(args) -> experiment.RunConfig:
    cfg = experiment.load_config(args.config)
    return experiment.apply_overrides(cfg, _overrides(args.set))


def _parse_values(text: str, axis: str) -> list:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("--values is empty")
    cast = int if axis == "anchors" else float
    return [cast(p) for p in parts]


def cmd_train(args) -> int:
    cfg = _load(args)
    res = experiment.run_train(cfg, args.out)
    last = res.rows[-1]
    print(f"{res.out_dir}: epoch {last['epoch']} accuracy {last['accuracy']:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    values = _parse_values(args.values, args.axis)
    summary = experiment.run_sweep(cfg, args.axis, values, args.out)
    for row in summary:
        print(f"{args.axis}={row['value']}: final {row['final_mse']:.6g} min {row['min_mse']:.6g}")
    return 0


def cmd_export(args) -> int:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    feats = experiment.export_features(args.checkpoint, args.data, out / "features.csv")
    print(f"{out / 'features.csv'}: {feats.shape[0]} rows, {feats.shape[1]} features")
    return 0


def cmd_gradcheck(args) -> int:
    results = audit.gradient_audit(args.seed, args.instances)
    rows = [vars(r) for r in results]
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        experiment.write_rows(Path(args.out) / "gradcheck.csv", tuple(rows[0]), rows)
    failed = [r.index for r in results if not r.passed]
    worst = max(r.max_rel_error for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} instances passed, max relative error {worst:.3g}")
    if failed:
        print(f"gradient audit failed on instances {failed}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coarse2fine", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and write its run directory")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="one run per grid value, plus summary.csv")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=sorted(experiment.SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma separated grid")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-features", help="dump frozen features of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("gradcheck", help="frozen-noise finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, experiment.TrainingDiverged) as exc:
        print(f"coarse2fine {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
