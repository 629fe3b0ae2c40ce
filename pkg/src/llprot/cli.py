"""Command line entry point: ``llprot {gen,bags,train,eval,sweep,losscheck}``.

Exit codes: 0 success, 1 invalid input, 2 training or numerical failure,
3 losscheck failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bags import load_bags, make_bags, save_bags
from .harness import (
    BlobSpec,
    ExperimentConfig,
    export_csv,
    gen_blobs,
    load_csv,
    losscheck,
    sweep,
    train_test_split,
)
from .losses import GradMode, LossKind, RotConfig
from .model import ModelSpec, load_checkpoint
from .trainer import TrainConfig, evaluate, train

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_LOSSCHECK = 0, 1, 2, 3


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--config", help="JSON file whose keys override command line flags")


def _add_data(p):
    p.add_argument("--data", help="dataset CSV (header f0..f{d-1},label)")
    p.add_argument("--num-classes", type=int, help="override K inferred from the labels")


def _add_blobs(p):
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--per-class", type=int, default=250)
    p.add_argument("--dim", type=int, default=10)
    p.add_argument("--spread", type=float, default=1.0)
    p.add_argument("--center-scale", type=float, default=1.5)


def _add_training(p):
    p.add_argument("--loss", choices=[k.value for k in LossKind], default="kl")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--sinkhorn-iters", type=int, default=75)
    p.add_argument("--grad-mode", choices=[m.value for m in GradMode], default="unrolled")
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.005)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr-drop-epoch", type=int)
    p.add_argument("--bags-per-batch", type=int, default=1)
    p.add_argument("--hidden", type=_int_list, default=[32], help="hidden layer widths, e.g. 64,32")
    p.add_argument("--activation", choices=["relu", "tanh"], default="relu")
    p.add_argument("--timing", action="store_true",
                   help="record wall-clock seconds (outputs are then not reproducible)")


def build_parser():
    parser = argparse.ArgumentParser(prog="llprot", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic Gaussian-blob dataset CSV")
    _add_common(p)
    _add_blobs(p)

    p = sub.add_parser("bags", help="partition a dataset into bags (JSON lines)")
    _add_common(p)
    _add_data(p)
    p.add_argument("--bag-size", type=int, required=True)

    p = sub.add_parser("train", help="train a classifier from bag proportions")
    _add_common(p)
    _add_data(p)
    _add_training(p)
    p.add_argument("--bag-size", type=int, default=16)
    p.add_argument("--bags", help="bag file built from --data; skips the train/test split")
    p.add_argument("--checkpoint-every", type=int, default=0)

    p = sub.add_parser("eval", help="score a checkpoint on a labeled dataset")
    _add_common(p)
    _add_data(p)
    p.add_argument("--model", required=True, help="checkpoint written by train")

    p = sub.add_parser("sweep", help="train every (loss, bag size) cell and tabulate")
    _add_common(p)
    _add_data(p)
    _add_blobs(p)
    _add_training(p)
    p.add_argument("--bag-sizes", type=_int_list, default=[1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024])
    p.add_argument("--losses", type=_str_list, default=["kl", "rot", "avgkl"])
    p.add_argument("--batch-instances", type=int, default=32,
                   help="bags per batch is max(1, this // bag size); 0 uses --bags-per-batch")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("losscheck", help="run the loss property suite and emit a JSON report")
    _add_common(p)
    p.add_argument("--inject-fault", choices=["tau_sign"], help=argparse.SUPPRESS)
    return parser


def _apply_config(args):
    if not args.config:
        return args
    with open(args.config, encoding="utf-8") as fh:
        overrides = json.load(fh)
    if not isinstance(overrides, dict):
        raise ValueError(f"{args.config}: expected a JSON object")
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if dest in ("command", "config") or not hasattr(args, dest):
            raise ValueError(f"{args.config}: unknown option {key!r} for {args.command}")
        setattr(args, dest, value)
    return args


def _dataset(args):
    if not args.data:
        raise ValueError("--data is required")
    return load_csv(args.data, args.num_classes)


def _train_config(args):
    rot = RotConfig(alpha=args.alpha, epsilon=args.epsilon, n_iter=args.sinkhorn_iters,
                    grad_mode=GradMode(args.grad_mode))
    return TrainConfig(loss_kind=LossKind(args.loss), rot=rot, learning_rate=args.lr,
                       momentum=args.momentum, weight_decay=args.weight_decay,
                       epochs=args.epochs, lr_drop_epoch=args.lr_drop_epoch,
                       bags_per_batch=args.bags_per_batch, seed=args.seed)


def _model_spec(args):
    return ModelSpec(hidden=tuple(args.hidden), activation=args.activation)


def _blob_spec(args):
    return BlobSpec(num_classes=args.classes, per_class=args.per_class, dim=args.dim,
                    spread=args.spread, center_scale=args.center_scale, seed=args.seed)


def cmd_gen(args):
    ds = gen_blobs(_blob_spec(args))
    export_csv(ds, args.out or "blobs.csv")
    print(f"wrote {len(ds)} instances to {args.out or 'blobs.csv'}")


def cmd_bags(args):
    bds = make_bags(_dataset(args), args.bag_size, args.seed)
    save_bags(bds, args.out or "bags.jsonl")
    print(f"wrote {len(bds)} bags of size {args.bag_size} to {args.out or 'bags.jsonl'}")


def cmd_train(args):
    data = _dataset(args)
    cfg = _train_config(args)
    if args.bags:
        bags, test = load_bags(args.bags, data), None
    else:
        train_ds, test = train_test_split(data, args.seed)
        bags = make_bags(train_ds, args.bag_size, args.seed)
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    params, hist = train(bags, _model_spec(args), cfg, eval_data=test,
                         history_csv=out / "history.csv", record_time=args.timing,
                         checkpoint_path=out / "model.llpw",
                         checkpoint_every=args.checkpoint_every)
    last = hist.records[-1] if len(hist) else None
    if last is not None:
        print(f"epoch {last.epoch}: train_loss={last.train_loss:.6f} "
              f"test_accuracy={last.test_accuracy:.4f}")
    print(f"wrote {out / 'history.csv'} and {out / 'model.llpw'}")


def cmd_eval(args):
    data = _dataset(args)
    params = load_checkpoint(args.model)
    acc, confusion = evaluate(params, data)
    report = {"accuracy": acc, "confusion": confusion.tolist()}
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_sweep(args):
    if args.data:
        source = {"blobs": None, "csv_path": args.data}
    else:
        source = {"blobs": _blob_spec(args)}
    cfg = ExperimentConfig(**source, bag_sizes=tuple(args.bag_sizes),
                           losses=tuple(args.losses), model=_model_spec(args),
                           train=_train_config(args),
                           batch_instances=args.batch_instances or None, seed=args.seed,
                           out_dir=args.out or "sweep", record_time=args.timing,
                           jobs=args.jobs)
    rows = sweep(cfg)
    failed = [r for r in rows if r["error"]]
    for r in failed:
        print(f"failed: loss={r['loss']} bag_size={r['bag_size']}: {r['error']}", file=sys.stderr)
    print(f"wrote {len(rows)} rows to {Path(cfg.out_dir) / 'sweep.csv'}")


def cmd_losscheck(args):
    report = losscheck(seed=args.seed, inject_fault=args.inject_fault)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK if report["passed"] else EXIT_LOSSCHECK


COMMANDS = {"gen": cmd_gen, "bags": cmd_bags, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep, "losscheck": cmd_losscheck}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _apply_config(args)
        return COMMANDS[args.command](args) or EXIT_OK
    except ArithmeticError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
