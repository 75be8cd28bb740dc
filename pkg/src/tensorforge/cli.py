"""Command line harness: ``tensorforge train|eval|synth``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, TensorForgeError
from .models import MODELS, build_model
from .tensor import cpu_engine
from .train import TrainConfig, Trainer, accuracy
from .trainkit.data import cifar10_load, find_cifar10, synthetic_split, write_cifar10_dir


def _flag(v: str) -> bool:
    v = v.lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on|off, got {v!r}")


def _common(p):
    p.add_argument("--net", default="fig2_resnet", choices=sorted(MODELS))
    p.add_argument("--data-dir", default=None,
                   help="directory holding the CIFAR-10 binary batches")
    p.add_argument("--subset", type=int, default=2000, help="use the first N training images")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--conv-threshold", type=int, default=64,
                   help="largest output H*W routed to the direct convolution kernel")
    p.add_argument("--checkpoint", default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tensorforge", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write metrics plus a checkpoint")
    _common(t)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--optimizer", default="adam", choices=["adam", "sgd"])
    t.add_argument("--sync", type=_flag, default=True, metavar="on|off")
    t.add_argument("--check", type=_flag, default=True, metavar="on|off")
    t.add_argument("--metrics-out", default="metrics.csv")
    t.add_argument("--eval-limit", type=int, default=2000,
                   help="test images scored after training (0 skips)")

    e = sub.add_parser("eval", help="score a checkpoint on a split")
    _common(e)
    e.add_argument("--split", default="test", choices=["train", "test"])

    s = sub.add_parser("synth", help="write a learnable synthetic dataset in CIFAR-10 format")
    s.add_argument("out_dir")
    s.add_argument("--train-count", type=int, default=2000)
    s.add_argument("--test-count", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    return ap


def _load_data(data_dir):
    found = find_cifar10(data_dir)
    if found is None:
        where = data_dir or "$TENSORFORGE_CIFAR10_DIR or ./data"
        raise ConfigError(f"no CIFAR-10 binary batches found in {where}")
    return cifar10_load(found)


def cmd_train(args, out=None) -> int:
    out = out or sys.stdout
    cfg = TrainConfig(net=args.net, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                      optimizer=args.optimizer, seed=args.seed, data_dir=args.data_dir,
                      subset=args.subset, sync=args.sync, check=args.check,
                      conv_threshold=args.conv_threshold, metrics_out=args.metrics_out,
                      checkpoint=args.checkpoint, eval_limit=args.eval_limit).validate()
    train, test = _load_data(cfg.data_dir)
    train = train.subset(cfg.subset)
    eg = cpu_engine(conv_threshold=cfg.conv_threshold)
    try:
        net = build_model(cfg.net, eg, cfg.seed)
        trainer = Trainer(net, eg, cfg)
        log = trainer.fit(train)
        log.summary["train_accuracy"] = accuracy(net, eg, train)
        if cfg.eval_limit:
            log.summary["test_accuracy"] = accuracy(net, eg, test.subset(cfg.eval_limit))
        log.write(cfg.metrics_out)
        if cfg.checkpoint:
            save_checkpoint(net, cfg.checkpoint)
        for k, v in log.summary.items():
            print(f"{k}={v}", file=out)
    finally:
        eg.close()
    return 0


def cmd_eval(args, out=None) -> int:
    out = out or sys.stdout
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    train, test = _load_data(args.data_dir)
    split = train.subset(args.subset) if args.split == "train" else test.subset(args.subset)
    eg = cpu_engine(conv_threshold=args.conv_threshold)
    try:
        net = build_model(args.net, eg, args.seed)
        load_checkpoint(args.checkpoint, net)
        acc = accuracy(net, eg, split, args.batch_size)
        print(f"accuracy={acc}", file=out)
    finally:
        eg.close()
    return 0


def cmd_synth(args, out=None) -> int:
    out = out or sys.stdout
    train = synthetic_split(args.train_count, args.seed)
    test = synthetic_split(args.test_count, args.seed + 1)
    d = write_cifar10_dir(Path(args.out_dir), train, test)
    print(f"wrote {len(train)} train / {len(test)} test records to {d}", file=out)
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "synth": cmd_synth}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except TensorForgeError as exc:
        print(f"{exc.category}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
