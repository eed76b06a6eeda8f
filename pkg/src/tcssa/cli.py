"""Command-line entry point: ``tcssa {compress,train,gradcheck,sweep}``.

Exit codes: 0 success, 1 data error, 2 usage error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import fields

from .aggregator import CompressConfig, compress, compression_ratio
from .formats import (
    FeatureCorruptionError,
    FeatureFormatError,
    load_params,
    read_feature_file,
    save_params,
    write_assignments,
    write_feature_file,
)
from .gradients import check_instance
from .losses import LossConstants
from .numerics import InvalidConfigError, InvalidInputError, RngState, ShapeError, gaussian_sample
from .params import init_params
from .trainer import SyntheticBagConfig, generate_synthetic_bags, slot_budget_sweep, train

DATA_ERRORS = (FeatureFormatError, FeatureCorruptionError, InvalidInputError, ShapeError, OSError)

_DATA_FLAGS = {
    "n_patches": "--n-patches",
    "dim": "--dim",
    "n_clusters": "--clusters",
    "evidence_fraction": "--evidence-fraction",
    "separation": "--separation",
    "offset": "--offset",
    "label_noise": "--label-noise",
    "n_train": "--train-bags",
    "n_val": "--val-bags",
    "n_test": "--test-bags",
}


def _fail(msg: str, code: int) -> int:
    print(f"tcssa: error: {msg}", file=sys.stderr)
    return code


def _add_data_flags(p):
    defaults = SyntheticBagConfig()
    for f in fields(SyntheticBagConfig):
        if f.name in _DATA_FLAGS:
            p.add_argument(_DATA_FLAGS[f.name], dest=f"data_{f.name}", type=type(getattr(defaults, f.name)),
                           default=getattr(defaults, f.name), help=f"synthetic data: {f.name}")


def _add_train_flags(p, slots_default):
    p.add_argument("--slots", type=int, default=slots_default, help="slot budget K")
    p.add_argument("--lambda", dest="lam", type=float, default=0.1, help="auxiliary loss weight")
    p.add_argument("--top-k", type=int, default=2, help="slots kept per patch")
    p.add_argument("--seed", type=int, default=0, help="data, init and order seed")
    p.add_argument("--epochs", type=int, default=150, help="training epochs")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    p.add_argument("--batch", type=int, default=8, help="bags per optimizer step")
    _add_data_flags(p)


def _data_config(args) -> SyntheticBagConfig:
    return SyntheticBagConfig(**{name: getattr(args, f"data_{name}") for name in _DATA_FLAGS})


def _check_train_args(parser, args):
    if args.slots < 2:
        parser.error("--slots must be at least 2")
    if not 1 <= args.top_k <= args.slots:
        parser.error("--top-k must lie in [1, --slots]")
    if args.epochs < 0 or args.batch < 1 or args.lr <= 0 or args.lam < 0:
        parser.error("--epochs >= 0, --batch >= 1, --lr > 0 and --lambda >= 0 are required")


def cmd_compress(args, parser) -> int:
    try:
        x = read_feature_file(args.input)
        if args.params:
            params = load_params(args.params)
            if args.slots is not None and args.slots != params.n_slots:
                parser.error(f"--slots {args.slots} disagrees with the {params.n_slots} slots in --params")
        else:
            k = 32 if args.slots is None else args.slots
            if k < 2:
                parser.error("--slots must be at least 2")
            params = init_params(RngState(args.seed), x.shape[1], k, 2)
        if not 1 <= args.top_k <= params.n_slots:
            parser.error("--top-k must lie in [1, K]")
        tokens, tables, stats = compress([x], params, CompressConfig(top_k=args.top_k))
        write_feature_file(args.output, tokens[0].tokens)
        if args.assignments:
            write_assignments(args.assignments, tables[0])
    except DATA_ERRORS as exc:
        return _fail(str(exc), 1)
    if args.stats:
        st = stats[0]
        k = params.n_slots
        print(f"slots={k} patches={x.shape[0]} compression_ratio={compression_ratio(x.shape[0], k)!r} "
              f"max_load={st.max_load!r}")
        print("load=" + ",".join(f"{f:.9g}" for f in st.load_fraction))
    return 0


def cmd_train(args, parser) -> int:
    _check_train_args(parser, args)
    try:
        data = generate_synthetic_bags(_data_config(args), args.seed)
    except InvalidConfigError as exc:
        parser.error(str(exc))
    report = train(data, n_slots=args.slots, constants=LossConstants(lam=args.lam), epochs=args.epochs,
                   batch_size=args.batch, lr=args.lr, seed=args.seed, top_k=args.top_k)
    text = report.to_text()
    try:
        if args.report:
            with open(args.report, "w") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
        if args.save_params:
            save_params(args.save_params, report.params)
    except OSError as exc:
        return _fail(str(exc), 1)
    if report.diverged:
        return _fail(f"training diverged after epoch {len(report.epochs)}", 3)
    return 0


def cmd_gradcheck(args, parser) -> int:
    if args.slots < 2:
        parser.error("--slots must be at least 2 (entropy loss divides by log K)")
    if min(args.n, args.d, args.batch) < 1 or args.classes < 2 or args.top_k > args.slots:
        parser.error("--n, --d, --batch >= 1, --classes >= 2 and --top-k <= --slots are required")
    rng = RngState(args.seed)
    params = init_params(rng, args.d, args.slots, args.classes)
    batch = [gaussian_sample(rng, (args.n, args.d)) for _ in range(args.batch)]
    labels = rng.generator.integers(0, args.classes, size=args.batch)
    report = check_instance(params, batch, labels, LossConstants(lam=args.lam), args.top_k, args.h, args.tol)
    for line in report.lines():
        print(line)
    return 0 if report.passed else 1


def cmd_sweep(args, parser) -> int:
    try:
        budgets = [int(b) for b in args.budgets.split(",")]
    except ValueError:
        parser.error("--budgets must be a comma-separated list of integers")
    args.slots = min(budgets)
    _check_train_args(parser, args)
    data = generate_synthetic_bags(_data_config(args), args.seed)
    rows = slot_budget_sweep(data, budgets, constants=LossConstants(lam=args.lam), epochs=args.epochs,
                             batch_size=args.batch, lr=args.lr, seed=args.seed, top_k=args.top_k)
    print("slots,test_accuracy,max_load")
    for k, acc, load in rows:
        print(f"{k},{acc:.6f},{load:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="tcssa", description="Semantic slot token compression.", formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="compress a feature file to K slot tokens", formatter_class=fmt)
    p.add_argument("--input", required=True, help="input feature file")
    p.add_argument("--output", required=True, help="output feature file of K tokens")
    p.add_argument("--params", help="parameter bundle; random init from --seed when omitted")
    p.add_argument("--slots", type=int, default=None, help="slot budget K (32 unless --params sets it)")
    p.add_argument("--top-k", type=int, default=2, help="slots kept per patch")
    p.add_argument("--assignments", help="optional per-patch assignment CSV")
    p.add_argument("--stats", action="store_true", help="print routing statistics")
    p.add_argument("--seed", type=int, default=0, help="init seed when --params is omitted")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("train", help="train on synthetic bags", formatter_class=fmt)
    _add_train_flags(p, slots_default=32)
    p.add_argument("--report", help="train report path (stdout when omitted)")
    p.add_argument("--save-params", help="write learned parameters here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0, help="instance seed")
    p.add_argument("--n", type=int, default=64, help="patches per item")
    p.add_argument("--d", type=int, default=8, help="feature dim")
    p.add_argument("--slots", type=int, default=4, help="slot count K")
    p.add_argument("--classes", type=int, default=3, help="class count")
    p.add_argument("--batch", type=int, default=2, help="items per instance")
    p.add_argument("--top-k", type=int, default=2, help="slots kept per patch")
    p.add_argument("--lambda", dest="lam", type=float, default=0.1, help="auxiliary loss weight")
    p.add_argument("--h", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="slot-budget ablation on synthetic bags", formatter_class=fmt)
    p.add_argument("--budgets", default="8,16,32,64", help="comma-separated slot budgets")
    _add_train_flags(p, slots_default=None)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    return args.func(args, sub)


if __name__ == "__main__":
    sys.exit(main())
