"""Command-line entry point: train, evaluate, export, report."""

import argparse
import logging
import os
import sys

import torch

from . import config as cfgmod
from .data import DatasetError
from .evaluation import RobustnessReport, build_report, plot_report, write_table
from .training import (CheckpointError, TrainingError, export_model, fit, init_state, load_model,
                       rescale_milestones)

logger = logging.getLogger("morel")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


def _common(p, out_required=False):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key, e.g. train.lr=0.1 (repeatable)")
    p.add_argument("--preset", choices=sorted(cfgmod.PRESETS))
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--device", help="torch device, e.g. cpu or cuda:0")


def build_parser():
    parser = argparse.ArgumentParser(prog="morel", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write best/last checkpoints")
    _common(p)
    p.add_argument("--epochs", type=int, help="shortcut for train.epochs; lr milestones are rescaled to match "
                                              "unless train.lr_milestones is set explicitly")
    p.add_argument("--dataset", choices=("cifar10", "cifar100", "synthetic"), help="shortcut for data.name")

    p = sub.add_parser("evaluate", help="white-box or transfer robustness report for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--mode", choices=("whitebox", "blackbox"), default="whitebox")
    p.add_argument("--surrogate", help="checkpoint used to craft transfer attacks (blackbox mode)")
    p.add_argument("--model-id")
    p.add_argument("--kind", choices=("best", "last"), help="checkpoint kind; inferred from the file name")
    _common(p)

    p = sub.add_parser("export", help="strip the training-only embedding space from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True, help="output model file")

    p = sub.add_parser("report", help="merge report JSON files into a table (and charts)")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--chart", action="store_true", help="also write one bar chart per report")
    return parser


def _read_text(path):
    if path is None:
        return None
    try:
        with open(path) as fh:
            return fh.read()
    except OSError as exc:
        raise cfgmod.ConfigError(f"cannot read config {path}: {exc}") from exc


def _resolve(args, base=None):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.out is not None:
        overrides.append(f"run.out={args.out}")
    if args.device is not None:
        overrides.append(f"run.device={args.device}")
    if getattr(args, "dataset", None) is not None:
        overrides.append(f"data.name={args.dataset}")
    text = _read_text(args.config)
    cfg = cfgmod.resolve(args.preset, text, overrides, base=base)
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        explicit = any(o.split("=", 1)[0].strip() == "train.lr_milestones" for o in overrides) or \
            (text is not None and "train.lr_milestones" in cfgmod.read_ini(text))
        milestones = cfg["train.lr_milestones"] if explicit else \
            rescale_milestones(cfg["train.lr_milestones"], cfg["train.epochs"], epochs)
        extra = [f"train.epochs={epochs}", f"train.lr_milestones={','.join(map(str, milestones))}"]
        cfg = cfgmod.resolve(args.preset, text, overrides + extra, base=base)
    return cfg


def _device(cfg):
    name = cfg["run.device"]
    try:
        device = torch.device(name)
    except RuntimeError as exc:
        raise cfgmod.ConfigError(f"run.device: {exc}") from exc
    if device.type == "cuda" and not torch.cuda.is_available():
        raise cfgmod.ConfigError(f"run.device={name} but CUDA is not available")
    return device


def cmd_train(args):
    cfg = _resolve(args)
    config = cfgmod.train_config(cfg)
    device = _device(cfg)
    out = cfg["run.out"]
    train, val, _ = cfgmod.load_data(cfg)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.ini"), "w") as fh:
        fh.write(cfgmod.to_ini(cfg))
    state = init_state(config, train.class_count, train.images.shape[1])
    state.model.to(device)
    if state.embedding is not None:
        state.embedding.to(device)
    state.extra["run_config"] = {k: v for k, v in cfg.items()}
    state = fit(config, train, val, out_dir=out, state=state)
    print(f"best robust accuracy {state.best_metric:.2f}% at epoch {state.best_epoch}; checkpoints in {out}")
    return EXIT_OK


def _kind(path, explicit):
    if explicit:
        return explicit
    stem = os.path.splitext(os.path.basename(path))[0]
    return stem if stem in ("best", "last") else "last"


def cmd_evaluate(args):
    if args.mode == "blackbox" and not args.surrogate:
        raise UsageError("--mode blackbox requires --surrogate")
    model, payload = load_model(args.checkpoint)
    cfg = _resolve(args, base=payload.get("extra", {}).get("run_config"))
    device = _device(cfg)
    model.to(device)
    surrogate = None
    if args.surrogate:
        surrogate, _ = load_model(args.surrogate)
        surrogate.to(device)
    _, _, test = cfgmod.load_data(cfg)
    kind = _kind(args.checkpoint, args.kind)
    model_id = args.model_id or cfg["run.method"]
    report = build_report(model, test, cfgmod.suite(cfg), args.mode, surrogate, model_id, kind,
                          cfg["data.name"], cfg["evaluate.batch_size"], cfg["run.seed"],
                          surrogate_id=args.surrogate)
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out, exist_ok=True)
    stem = os.path.join(out, f"report_{model_id}_{kind}_{args.mode}")
    report.save(stem + ".json")
    write_table([report], stem + ".csv")
    if cfg["evaluate.chart"]:
        plot_report(report, stem + ".png")
    print(report.to_json())
    return EXIT_OK


def cmd_export(args):
    export_model(args.checkpoint, args.out)
    print(f"exported {args.checkpoint} -> {args.out}")
    return EXIT_OK


def cmd_report(args):
    reports = [RobustnessReport.load(p) for p in args.reports]
    os.makedirs(args.out, exist_ok=True)
    modes = {r.mode for r in reports}
    for mode in sorted(modes):
        write_table([r for r in reports if r.mode == mode], os.path.join(args.out, f"table_{mode}.csv"))
    if args.chart:
        for r in reports:
            plot_report(r, os.path.join(args.out, f"{r.model_id}_{r.checkpoint_kind}_{r.mode}.png"))
    print(f"wrote tables for {sorted(modes)} to {args.out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "export": cmd_export, "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (cfgmod.ConfigError, UsageError) as exc:
        print(f"morel: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError, TrainingError, OSError, RuntimeError, ValueError) as exc:
        print(f"morel: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
