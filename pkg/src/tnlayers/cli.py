"""Command-line entry point: train, verify, report, and bench.

Every run writes a complete config.json first, so any artifact directory
can reproduce its run with `tnlayers train --config <dir>/config.json`.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 verification
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import data as dat
from . import report as rep
from . import verification
from .model import ModelConfig, build_model, save_checkpoint, train

COMMANDS = ("train", "verify", "report", "bench")
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_VERIFY = 0, 2, 3, 4

# keys a --config file may preset; everything else in the file is ignored
CONFIG_KEYS = ("command", "dataset", "data_dir", "head", "tt_bond",
               "mera_final_rank", "seed", "subset", "max_iter",
               "check_interval", "patience", "out", "channels", "batch_size",
               "lr", "no_augment", "per_channel_mean", "quick")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tnlayers",
        description="train and compare factorized-head image classifiers")
    p.add_argument("command_pos", nargs="?", metavar="command",
                   help=f"one of {', '.join(COMMANDS)}")
    p.add_argument("paths", nargs="*",
                   help="run directories (report command)")
    p.add_argument("--command", dest="command_flag", default=None,
                   help="alternative to the positional command")
    p.add_argument("--config", default=None,
                   help="JSON config file; explicit flags override it")
    p.add_argument("--dataset", default="cifar10",
                   choices=("cifar10", "cifar100", "mnist", "synthetic"))
    p.add_argument("--data-dir", default=None,
                   help="dataset root (falls back to $TNLAYERS_DATA_DIR)")
    p.add_argument("--head", default="fc1",
                   choices=("fc1", "fc2", "mera", "tt"))
    p.add_argument("--tt-bond", type=int, default=3,
                   help="internal bond size of the tt head")
    p.add_argument("--mera-final-rank", type=int, default=6, choices=(4, 6),
                   help="rank of the last mera element when a column ends "
                        "with three legs: 6 merges them, 4 keeps pairing")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subset", type=int, default=None,
                   help="train on the first N images (val/test shrink to N/5)")
    p.add_argument("--max-iter", type=int, default=4000)
    p.add_argument("--check-interval", type=int, default=500)
    p.add_argument("--patience", type=int, default=10,
                   help="stop after this many checks without a new best")
    p.add_argument("--out", default=None, help="artifact directory")
    p.add_argument("--channels", type=int, nargs=6,
                   default=[64, 64, 64, 64, 64, 256], metavar="C",
                   help="output channels of the six conv layers")
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--no-augment", action="store_true",
                   help="disable flip/translate augmentation")
    p.add_argument("--per-channel-mean", action="store_true",
                   help="normalize with per-channel instead of per-pixel mean")
    p.add_argument("--quick", action="store_true",
                   help="verify: smaller random-case counts")
    return p


def parse_args(argv) -> tuple[argparse.Namespace, str | None]:
    """Parse argv on top of an optional --config file; flags win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    ns = argparse.Namespace()
    preset_command = None
    if known.config:
        with open(known.config) as fh:
            loaded = json.load(fh)
        for key in CONFIG_KEYS:
            if key in loaded:
                setattr(ns, key, loaded[key])
        preset_command = loaded.get("command")
    args = build_parser().parse_args(argv, namespace=ns)
    command = args.command_flag or args.command_pos or preset_command
    if args.command_flag and args.command_pos:
        # the positional slot swallowed a path; put it back
        args.paths = [args.command_pos] + args.paths
    return args, command


def resolve_out(args, command: str) -> str:
    if args.out:
        return args.out
    if command == "train":
        return os.path.join("runs", f"{args.head}-{args.dataset}-"
                                    f"seed{args.seed}")
    return os.path.join("runs", command)


def load_splits(args) -> dat.Splits:
    if args.dataset == "synthetic":
        splits = dat.synthetic_splits(5000, 1000, 1000, seed=1234)
    else:
        root = args.data_dir or os.environ.get("TNLAYERS_DATA_DIR")
        if not root:
            raise dat.DataError(
                "no data directory: pass --data-dir or set TNLAYERS_DATA_DIR")
        if args.dataset == "cifar10":
            splits = dat.load_cifar(root, variant=10)
        elif args.dataset == "cifar100":
            splits = dat.load_cifar(root, variant=100)
        else:
            splits = dat.load_mnist(root)
    if args.subset:
        splits = dat.subset(splits, args.subset)
    return splits


def model_config(args, splits: dat.Splits) -> ModelConfig:
    size, _, chans = splits.image_shape
    return ModelConfig(
        channels=tuple(args.channels),
        head=args.head,
        classes=splits.n_classes,
        tt_bond=args.tt_bond,
        mera_final_mode="pair" if args.mera_final_rank == 4 else "merge",
        image_size=size,
        in_channels=chans,
    )


def emit_config(args, command: str, out_dir: str,
                model: ModelConfig | None) -> None:
    doc = {key: getattr(args, key, None) for key in CONFIG_KEYS
           if key != "command"}
    doc["command"] = command
    doc["out"] = out_dir
    if model is not None:
        doc["model"] = model.to_dict()
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_metrics(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("iteration,train_loss,val_acc,test_acc,wall_ms\n")
        for it, loss, val, test, wall in rows:
            fh.write(f"{it},{loss!r},{val!r},{test!r},{wall}\n")


def cmd_train(args, command: str, out_dir: str) -> int:
    splits = load_splits(args)
    cfg = model_config(args, splits)
    model = build_model(cfg)
    emit_config(args, command, out_dir, cfg)
    counts = model.param_report()
    print(f"{cfg.head} head on {splits.name}: {counts['fc_layer']} "
          f"classifier-section parameters, {counts['total']} total")

    def log(row):
        it, loss, val, test, wall = row
        print(f"iter {it:>6d}  loss {loss:.4f}  val {val:.4f}  "
              f"test {test:.4f}  ({wall} ms)")

    result = train(model, splits, seed=args.seed, max_iter=args.max_iter,
                   check_interval=args.check_interval, patience=args.patience,
                   batch_size=args.batch_size, lr=args.lr,
                   augment_train=not args.no_augment,
                   per_channel_mean=args.per_channel_mean, log=log)
    write_metrics(os.path.join(out_dir, "metrics.csv"), result.metrics)
    save_checkpoint(os.path.join(out_dir, "best.ckpt"), cfg, result.state)
    print(f"stopped at iteration {result.iterations} ({result.stop_reason}); "
          f"best val {result.best_val:.4f}, test at best {result.best_test:.4f}")
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_verify(args, command: str, out_dir: str) -> int:
    report = verification.run_suites(seed=args.seed, quick=args.quick)
    emit_config(args, command, out_dir, None)
    with open(os.path.join(out_dir, "verify.json"), "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    for c in report["checks"]:
        status = "pass" if c["passed"] else "FAIL"
        print(f"{c['name']:34s} {status}  metric {c['metric']:.3e}  "
              f"tolerance {c['tolerance']:g}")
    if not report["passed"]:
        bad = [c["name"] for c in report["checks"] if not c["passed"]]
        print(f"verification FAILED: {', '.join(bad)}", file=sys.stderr)
        return EXIT_VERIFY
    print("verification passed")
    return EXIT_OK


def cmd_report(args, command: str, out_dir: str) -> int:
    if not args.paths:
        print("report needs run directories as positional arguments",
              file=sys.stderr)
        return EXIT_CONFIG
    text, missing, n_rows = rep.cmd_report(args.paths, out_dir)
    emit_config(args, command, out_dir, None)
    print(text)
    if n_rows == 0:
        print("no readable runs among the given paths", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_bench(args, command: str, out_dir: str) -> int:
    text = rep.cmd_bench(out_dir, seed=args.seed)
    emit_config(args, command, out_dir, None)
    print(text)
    return EXIT_OK


DISPATCH = {"train": cmd_train, "verify": cmd_verify,
            "report": cmd_report, "bench": cmd_bench}


def main(argv=None) -> int:
    try:
        args, command = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors already exit with 2
        return int(exc.code or 0)
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        print(f"config is not valid JSON: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if command not in COMMANDS:
        print(f"unknown or missing command {command!r}; "
              f"expected one of {', '.join(COMMANDS)}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = resolve_out(args, command)
    os.makedirs(out_dir, exist_ok=True)
    try:
        return DISPATCH[command](args, command, out_dir)
    except dat.DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
