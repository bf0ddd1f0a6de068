"""Command-line interface: ``ocresnet {train,eval,prune,bounds}``.

Exit codes: 0 success, 2 config/validation error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import data as data_mod
from .bounds import audit_bounds, format_table
from .errors import ConfigError, DimensionError, FormatError, NumericError
from .io import (
    Checkpoint,
    atomic_write,
    bounds_csv,
    load_checkpoint,
    save_checkpoint,
    trajectory_csv,
)
from .resnet import NetworkConfig
from .subresnet import DEFAULT_PLATEAU_TOLERANCE, extract_subresnet, plateau_depth
from .training import TrainConfig, evaluate_trajectory, train

logger = logging.getLogger("ocresnet")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class StagesSection(_Strict):
    blocks_per_stage: int = Field(ge=1)
    widths: list[int] = Field(min_length=1)


class NetworkSection(_Strict):
    widths: Optional[list[int]] = None
    depth: Optional[int] = Field(default=None, ge=0)
    width: Optional[int] = Field(default=None, ge=1)
    stages: Optional[StagesSection] = None
    input_dim: Optional[int] = Field(default=None, ge=1)
    num_outputs: Optional[int] = Field(default=None, ge=1)
    loss_kind: Literal["cross_entropy", "l2"] = "cross_entropy"
    exit_mode: Literal["weight_shared", "extra_params"] = "weight_shared"
    hidden_multiplier: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _one_shape(self):
        given = [self.widths is not None, self.depth is not None or self.width is not None,
                 self.stages is not None]
        if sum(given) != 1:
            raise ValueError("give exactly one of: widths, depth+width, stages")
        if given[1] and (self.depth is None or self.width is None):
            raise ValueError("depth and width must be given together")
        return self

    def widths_list(self) -> list[int]:
        if self.widths is not None:
            return self.widths
        if self.stages is not None:
            ws = [self.stages.widths[0]]
            for w in self.stages.widths:
                ws += [w] * self.stages.blocks_per_stage
            return ws
        return [self.width] * (self.depth + 1)


class TrainSection(_Strict):
    # gamma, lambda and seed are deliberately required
    gamma: float = Field(ge=0)
    lambda_: float = Field(alias="lambda", ge=0)
    seed: int
    epochs: int = Field(ge=0)
    batch_size: int = Field(default=128, ge=1)
    lr: float = Field(default=0.1, ge=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    lr_milestones: Optional[list[int]] = None
    exit_lr_scale: bool = False


class RunConfig(_Strict):
    dataset: str
    network: Optional[NetworkSection] = None  # omitted when starting from --init
    train: TrainSection
    out_dir: str
    eval_every: int = Field(default=1, ge=1)


def _validation_message(e: ValidationError) -> str:
    parts = []
    for err in e.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def load_run_config(path) -> RunConfig:
    with open(path) as f:
        try:
            raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not valid YAML: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}: {_validation_message(e)}") from None
    data_mod.parse_source(cfg.dataset)
    return cfg


def build_configs(cfg: RunConfig, train_set: data_mod.Dataset) -> tuple[NetworkConfig, TrainConfig]:
    n = cfg.network
    if n is None:
        raise ConfigError("config has no network section (required unless --init is given)")
    if n.input_dim is not None and n.input_dim != train_set.dim:
        raise ConfigError(f"network.input_dim: expected {train_set.dim} from dataset, got {n.input_dim}")
    if n.num_outputs is not None and n.num_outputs < train_set.num_classes:
        raise ConfigError(f"network.num_outputs: dataset has {train_set.num_classes} classes, got {n.num_outputs}")
    net = NetworkConfig(widths=tuple(n.widths_list()), input_dim=train_set.dim,
                        num_outputs=n.num_outputs or train_set.num_classes, loss_kind=n.loss_kind,
                        exit_mode=n.exit_mode, hidden_multiplier=n.hidden_multiplier)
    return net, train_config(cfg)


def train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(gamma=t.gamma, lam=t.lambda_, epochs=t.epochs, seed=t.seed, batch_size=t.batch_size,
                       lr=t.lr, momentum=t.momentum,
                       lr_milestones=tuple(t.lr_milestones) if t.lr_milestones is not None else None,
                       exit_lr_scale=t.exit_lr_scale)


def training_label(tc: TrainConfig | None) -> str:
    if tc is None:
        return "unknown"
    return "standard training" if tc.standard else "stage cost"


def _reuse_backbone(ckpt: Checkpoint) -> bool:
    return ckpt.train_config is not None and ckpt.train_config.standard


def _check_dims(ckpt: Checkpoint, ds: data_mod.Dataset) -> None:
    if ds.dim != ckpt.config.input_dim:
        raise DimensionError(f"dataset input_dim {ds.dim} does not match checkpoint input_dim "
                             f"{ckpt.config.input_dim}")


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    out = Path(args.out_dir or cfg.out_dir)
    train_set = data_mod.load_source(cfg.dataset, "train")
    test_set = data_mod.load_source(cfg.dataset, "test")
    init = None
    if args.init:
        if cfg.network is not None:
            raise ConfigError("--init takes the network from the checkpoint; drop the network section")
        start = load_checkpoint(args.init)
        _check_dims(start, train_set)
        init, net, tc = start.weights, start.config, train_config(cfg)
    else:
        net, tc = build_configs(cfg, train_set)
    meta = {"training": training_label(tc), "dataset": cfg.dataset}
    if args.init:
        meta["init"] = str(args.init)
    history = []
    best = {"acc": -1.0}

    def on_epoch(epoch, weights, records):
        if not records:
            return
        history.extend(records)
        atomic_write(out / "trajectory.csv", trajectory_csv(history, with_epoch=True))
        acc = records[-1].accuracies[-1]
        if acc > best["acc"]:
            best["acc"] = acc
            save_checkpoint(out / "best.ckpt", Checkpoint(weights, tc, train_set.normalization, tc.seed,
                                                          epoch + 1, {**meta, "selected_on": records[-1].split}))

    out.mkdir(parents=True, exist_ok=True)
    result = train(net, tc, train_set, test_set, eval_every=cfg.eval_every, init=init, on_epoch=on_epoch)
    save_checkpoint(out / "final.ckpt", Checkpoint(result.weights, tc, train_set.normalization, tc.seed,
                                                   tc.epochs, meta))
    summary = {"label": meta["training"], "epochs": tc.epochs, "params": net.num_params(),
               "objective_per_epoch": result.objectives}
    if history:
        last = history[-1]
        summary["final_accuracy"] = last.accuracies[-1]
        summary["final_split"] = last.split
    atomic_write(out / "run.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"{meta['training']}: {tc.epochs} epochs, final {summary.get('final_split', '-')} accuracy "
          f"{summary.get('final_accuracy', float('nan')):.4f} -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = data_mod.load_source(args.dataset, args.split)
    _check_dims(ckpt, ds)
    rec = evaluate_trajectory(ckpt.weights, ds, reuse_backbone=_reuse_backbone(ckpt))
    text = trajectory_csv([rec])
    summary = (f"{args.split}: depth {rec.depth} final loss {rec.losses[-1]:.6f} "
               f"accuracy {rec.accuracies[-1]:.4f}")
    if args.out_dir:
        atomic_write(Path(args.out_dir) / f"eval_{args.split}.csv", text)
        print(summary)
    else:
        sys.stdout.write(text)
        print(summary, file=sys.stderr)
    return EXIT_OK


def _millions(n: int) -> str:
    return f"{n / 1e6:.2g} M" if n >= 1e5 else f"{n} params"


def cmd_prune(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    n = ckpt.config.depth
    report = {"parent_depth": n, "parent_params": ckpt.config.num_params()}
    if args.auto:
        if not args.dataset:
            raise ConfigError("--auto needs --dataset to compute the exit trajectory")
        traj_set = data_mod.load_source(args.dataset, args.split)
        _check_dims(ckpt, traj_set)
        rec = evaluate_trajectory(ckpt.weights, traj_set, reuse_backbone=_reuse_backbone(ckpt))
        m = plateau_depth(rec, args.tolerance)
        report.update(auto=True, tolerance=args.tolerance, trajectory_split=args.split)
    else:
        if args.depth is None:
            raise ConfigError("give --depth M or --auto")
        m = args.depth
    if m > n or m < 0:
        raise ConfigError(f"--depth {m} outside [0, {n}]")
    child = extract_subresnet(ckpt.weights, m)
    report.update(child_depth=m, child_params=child.config.num_params(),
                  stage_boundary_warning=not ckpt.config.is_homogeneous)
    if args.dataset:
        test = data_mod.load_source(args.dataset, "test")
        _check_dims(ckpt, test)
        parent_rec = evaluate_trajectory(ckpt.weights, test, reuse_backbone=_reuse_backbone(ckpt))
        child_rec = evaluate_trajectory(child, test)
        report.update(parent_test_accuracy=parent_rec.accuracies[-1],
                      child_test_accuracy=child_rec.accuracies[-1])
    meta = {**ckpt.meta, "pruned_from_depth": n, "pruned_at": m}
    out = Path(args.out_dir or Path(args.checkpoint).parent)
    save_checkpoint(out / f"subresnet_{m}.ckpt",
                    Checkpoint(child, ckpt.train_config, ckpt.normalization, ckpt.seed, ckpt.epoch, meta))
    atomic_write(out / f"prune_{m}.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    line = (f"ResNet-{n} ({_millions(report['parent_params'])}) -> SubResNet-{m} "
            f"({_millions(report['child_params'])})")
    if "child_test_accuracy" in report:
        line += (f"; test accuracy {100 * report['parent_test_accuracy']:.2f}% -> "
                 f"{100 * report['child_test_accuracy']:.2f}%")
    if report["stage_boundary_warning"]:
        line += "; warning: non-homogeneous parent, pruning across stage boundaries is unreliable"
    print(line)
    return EXIT_OK


def cmd_bounds(args) -> int:
    parent = load_checkpoint(args.checkpoint)
    children = [load_checkpoint(p) for p in args.child]
    ds = data_mod.load_source(args.dataset, args.split)
    _check_dims(parent, ds)
    tc = parent.train_config
    gamma = args.gamma if args.gamma is not None else (tc.gamma if tc else None)
    lam = args.lam if args.lam is not None else (tc.lam if tc else None)
    if gamma is None or lam is None:
        raise ConfigError("parent checkpoint has no train config; pass --gamma and --lambda")
    if gamma <= 0:
        raise ConfigError(f"bounds need gamma > 0 (parent trained with gamma={gamma}); pass --gamma")
    reports = audit_bounds(parent.weights, [c.weights for c in children], ds, gamma, lam,
                           parent_reuse_backbone=_reuse_backbone(parent))
    table = format_table(reports)
    out = Path(args.out_dir or Path(args.checkpoint).parent)
    atomic_write(out / "bounds.csv", bounds_csv(reports))
    atomic_write(out / "bounds.txt", table + "\n")
    print(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ocresnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir")
    t.add_argument("--seed", type=int)
    t.add_argument("--init", help="start from this checkpoint's weights (e.g. to fine-tune a SubResNet)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-depth trajectory of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", choices=data_mod.SPLITS, default="test")
    e.add_argument("--out-dir")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("prune", help="cut a checkpoint down to a SubResNet")
    pr.add_argument("--checkpoint", required=True)
    group = pr.add_mutually_exclusive_group(required=True)
    group.add_argument("--depth", type=int)
    group.add_argument("--auto", action="store_true")
    pr.add_argument("--tolerance", type=float, default=DEFAULT_PLATEAU_TOLERANCE)
    pr.add_argument("--dataset")
    pr.add_argument("--split", choices=data_mod.SPLITS, default="train")
    pr.add_argument("--out-dir")
    pr.set_defaults(func=cmd_prune)

    b = sub.add_parser("bounds", help="loss-bound table for a parent and its SubResNets")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--child", action="append", required=True)
    b.add_argument("--dataset", required=True)
    b.add_argument("--split", choices=data_mod.SPLITS, default="train")
    b.add_argument("--gamma", type=float)
    b.add_argument("--lambda", dest="lam", type=float)
    b.add_argument("--out-dir")
    b.set_defaults(func=cmd_bounds)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DimensionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
