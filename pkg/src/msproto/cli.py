"""Command-line workbench: ``msproto <command> [--config FILE] ...``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import logging
import sys
from pathlib import Path

import torch

from . import analysis
from . import config as config_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetError, generate_toy_dataset, load_dataset, save_dataset
from .errors import ConfigError, StageOrderError
from .grouping import threshold_groups
from .model import MultiScaleProtoNet
from .training import TrainingLog, run_stage1, run_stage2

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
DTYPES = {"float32": torch.float32, "float64": torch.float64}


# -- shared helpers -------------------------------------------------------------------

def resolve_config(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "profile", None):
        cfg.training = config_mod.TrainingSection(args.profile, cfg.training.overrides,
                                                  cfg.training.steps)
    if getattr(args, "out", None):
        cfg.out = args.out
    return cfg


def datasets(cfg: config_mod.ExperimentConfig):
    """(train, eval) samples: folders when configured, otherwise the toy generator."""
    d = cfg.data
    train = load_dataset(d.train) if d.train else generate_toy_dataset(d.toy, d.n_train)
    if d.eval:
        ev = load_dataset(d.eval)
    elif d.train:
        ev = []
    else:
        ev = generate_toy_dataset(dataclasses.replace(d.toy, seed=d.toy.seed + 1), d.n_eval) \
            if d.n_eval else []
    return train, ev


def build_model(cfg: config_mod.ExperimentConfig) -> MultiScaleProtoNet:
    return MultiScaleProtoNet(cfg.backbone, cfg.num_classes, cfg.prototypes, seed=cfg.seed,
                              dtype=DTYPES[cfg.dtype])


def _provenance(cfg) -> dict:
    # the output location is not part of what was trained
    return {k: v for k, v in cfg.to_dict().items() if k != "out"}


def _out_dir(cfg) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    return out


def _eval_split(args, cfg):
    if getattr(args, "data", None):
        return load_dataset(args.data)
    return datasets(cfg)[1]


# -- commands -------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    d = cfg.data
    names = [f"class{c}" for c in range(d.toy.num_classes)]
    save_dataset(generate_toy_dataset(d.toy, d.n_train), out / "train", d.toy.num_classes, names)
    if d.n_eval:
        ev = generate_toy_dataset(dataclasses.replace(d.toy, seed=d.toy.seed + 1), d.n_eval)
        save_dataset(ev, out / "eval", d.toy.num_classes, names)
    print(f"wrote dataset to {out}")
    return EXIT_OK


def cmd_train_stage1(args) -> int:
    cfg = resolve_config(args)
    plan = cfg.plan()
    train, _ = datasets(cfg)
    out = _out_dir(cfg)
    model = build_model(cfg)
    tlog = TrainingLog()
    run_stage1(plan, model, train, tlog)
    tlog.write_csv(out / "stage1_log.csv")
    digest = save_checkpoint(out / "stage1.npz", model, plan, _provenance(cfg))
    print(f"stage1 checkpoint {out / 'stage1.npz'} digest {digest} config {cfg.digest()}")
    return EXIT_OK


def cmd_train_stage2(args) -> int:
    cfg = resolve_config(args)
    if not args.checkpoint:
        raise ConfigError("train-stage2 needs --checkpoint from train-stage1")
    model, _, _ = load_checkpoint(args.checkpoint)
    if model.stage != "projected":
        raise StageOrderError(
            f"{args.checkpoint} is at stage {model.stage!r}; train-stage2 needs a projected stage-1 checkpoint")
    plan = cfg.plan()
    train, _ = datasets(cfg)
    out = _out_dir(cfg)
    tlog = TrainingLog()
    run_stage2(plan, model, train, tlog)
    tlog.write_csv(out / "stage2_log.csv")
    digest = save_checkpoint(out / "stage2.npz", model, plan, _provenance(cfg))
    print(f"stage2 checkpoint {out / 'stage2.npz'} digest {digest} config {cfg.digest()}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    model, _, _ = load_checkpoint(args.checkpoint)
    samples = list(_eval_split(args, cfg))
    if not samples:
        raise ValueError("evaluation dataset is empty")
    mean, per_class = analysis.evaluate(model, samples)
    rows = analysis.eval_rows(mean, per_class)
    path = analysis.write_csv(Path(cfg.out) / "eval.csv", rows, ["metric", "class", "value"])
    for r in rows:
        print(f"{r['class']:>6}  {r['value']:.4f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = resolve_config(args)
    model, _, _ = load_checkpoint(args.checkpoint)
    which = analysis.ANALYSES if args.which == "all" else tuple(args.which.split(","))
    for w in which:
        if w not in analysis.ANALYSES:
            raise ConfigError(f"unknown analysis {w!r}; expected any of {analysis.ANALYSES}")
    if model.groups is None:
        skipped = [w for w in which if w in ("overlap", "groups")]
        if skipped and args.which == "all":
            which = tuple(w for w in which if w not in skipped)
            print(f"skipping {', '.join(skipped)}: checkpoint has no groups")
    train, ev = datasets(cfg)
    ev = list(load_dataset(args.data) if args.data else ev)
    if not ev:
        raise ValueError("analysis dataset is empty")
    written = analysis.run_analyses(model, which, ev, train, Path(cfg.out) / "analysis",
                                    sigma=args.sigma, seed=cfg.seed)
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    train, ev = datasets(cfg)
    if not ev:
        raise ValueError("ablation needs an evaluation split")
    out = _out_dir(cfg)
    plan = cfg.plan()
    if args.checkpoint:
        base, _, _ = load_checkpoint(args.checkpoint)
        if base.stage != "projected":
            raise StageOrderError("ablate --checkpoint expects a projected stage-1 checkpoint")
    else:
        base = build_model(cfg)
        run_stage1(plan, base, train)
    base_miou, _ = analysis.evaluate(base, ev)
    rows = []
    if args.axis == "alpha":
        model = run_stage2(plan, copy.deepcopy(base), train)
        for alpha in (0.0, 0.05, 0.1):
            model.groups = threshold_groups(model.raw_groups, alpha)
            count, support = analysis.support_summary(model, alpha)
            m, _ = analysis.evaluate(model, ev)
            rows.append({"axis": "alpha", "value": alpha, "active_prototypes": count,
                         "mean_support": support, "miou": m, "stage1_miou": base_miou})
    elif args.axis == "lambda_ent":
        for lam in (0.0, plan.lambda_ent):
            model = run_stage2(dataclasses.replace(plan, lambda_ent=lam), copy.deepcopy(base), train)
            count, support = analysis.support_summary(model, plan.alpha)
            m, _ = analysis.evaluate(model, ev)
            rows.append({"axis": "lambda_ent", "value": lam, "active_prototypes": count,
                         "mean_support": support, "miou": m, "stage1_miou": base_miou})
    else:
        raise ConfigError(f"unknown ablation axis {args.axis!r}")
    path = analysis.write_csv(out / f"ablate_{args.axis}.csv", rows)
    print(f"{'value':>8} {'protos':>7} {'support':>8} {'mIoU':>7}")
    for r in rows:
        print(f"{r['value']:>8.3g} {r['active_prototypes']:>7d} {r['mean_support']:>8.3f} {r['miou']:>7.4f}")
    print(f"wrote {path}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msproto", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment YAML file")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="experiment seed (overrides the config)")
        p.add_argument("--profile", help="training profile (overrides the config)")
        return p

    common(sub.add_parser("gen-data", help="write the toy dataset as PNG folders")).set_defaults(func=cmd_gen_data)
    common(sub.add_parser("train-stage1", help="prototype learning, projection and dedup")
           ).set_defaults(func=cmd_train_stage1)
    p = common(sub.add_parser("train-stage2", help="learn sparse groups on a stage-1 checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_train_stage2)
    p = common(sub.add_parser("eval", help="per-class IoU and mIoU"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset folder (default: the config's eval split)")
    p.set_defaults(func=cmd_eval)
    p = common(sub.add_parser("analyze", help="interpretability analyses as CSV and PNG"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset folder (default: the config's eval split)")
    p.add_argument("--which", default="all",
                   help="comma-separated subset of " + ",".join(analysis.ANALYSES) + " or 'all'")
    p.add_argument("--sigma", type=float, default=0.05, help="stability noise level")
    p.set_defaults(func=cmd_analyze)
    p = common(sub.add_parser("ablate", help="alpha or lambda_ent sweep"))
    p.add_argument("--axis", choices=("alpha", "lambda_ent"), required=True)
    p.add_argument("--checkpoint", help="reuse a projected stage-1 checkpoint")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageOrderError, DatasetError, FileNotFoundError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
