"""Command-line interface: train, eval, contract, verify, inspect."""

from __future__ import annotations

import argparse
import json
import sys

from . import bench, model_io
from .errors import (
    ArchiveError,
    ConfigError,
    ConvergenceError,
    DimensionError,
    DivergenceError,
    DTypeError,
    RankError,
    TopologyError,
)

_DOMAIN_ERRORS = (
    ArchiveError, ConfigError, ConvergenceError, DimensionError,
    DivergenceError, DTypeError, RankError, TopologyError,
    FileNotFoundError,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="opmtl",
                                     description="Overparameterised multitask training")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training experiment from a config file")
    p_train.add_argument("config")
    p_train.add_argument("--seed", type=int, default=None, help="override config seed")
    p_train.add_argument("--mode", default=None, help="override config mode")
    p_train.add_argument("--epochs", type=int, default=None, help="override config epochs")

    p_eval = sub.add_parser("eval", help="evaluate an archived model on a dataset")
    p_eval.add_argument("archive")
    p_eval.add_argument("dataset", help="dataset spec, e.g. shapes(n=100,image_size=64)")
    p_eval.add_argument("--split", choices=("train", "val"), default="val")

    p_contract = sub.add_parser("contract", help="contract a factorized archive")
    p_contract.add_argument("in_archive")
    p_contract.add_argument("out_archive")

    p_verify = sub.add_parser("verify", help="verify factorized/compact equivalence")
    p_verify.add_argument("fac_archive")
    p_verify.add_argument("compact_archive")
    p_verify.add_argument("--samples", type=int, default=16)
    p_verify.add_argument("--tol", type=float, default=1e-5)
    p_verify.add_argument("--size", type=int, default=32, help="spatial extent for conv inputs")

    p_inspect = sub.add_parser("inspect", help="list tensors in an archive")
    p_inspect.add_argument("archive")
    return parser


def _infer_input_shape(model, size: int) -> tuple[int, ...]:
    first = model.trunk[0]
    if hasattr(first, "in_ch"):
        return (first.in_ch, size, size)
    if hasattr(first, "in_dim"):
        return (first.in_dim,)
    raise TopologyError("cannot infer input shape from first trunk layer")


def _cmd_train(args) -> int:
    overrides = {"seed": args.seed, "mode": args.mode, "epochs": args.epochs}
    result = bench.run_experiment(args.config, overrides)
    json.dump(result, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def _cmd_eval(args) -> int:
    model = model_io.load_model(args.archive)
    train_ds, val_ds = bench.build_dataset(args.dataset)
    dataset = train_ds if args.split == "train" else val_ds
    report = bench.evaluate(model, dataset)
    sys.stdout.write(report.to_json() + "\n")
    return 0


def _cmd_contract(args) -> int:
    model = model_io.load_model(args.in_archive)
    model_io.save_model(args.out_archive, model_io.contract_model(model))
    return 0


def _cmd_verify(args) -> int:
    fac = model_io.load_model(args.fac_archive)
    compact = model_io.load_model(args.compact_archive)
    report = model_io.verify_equivalence(
        fac, compact, _infer_input_shape(fac, args.size),
        n_samples=args.samples, tol=args.tol,
    )
    sys.stdout.write(report.to_json() + "\n")
    return 0 if report.passed else 1


def _cmd_inspect(args) -> int:
    tensors = model_io.load_archive(args.archive)
    for name, tensor in tensors.items():
        shape = "x".join(str(e) for e in tensor.shape)
        sys.stdout.write(f"{name}\t{tensor.dtype}\t{shape}\n")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "contract": _cmd_contract,
    "verify": _cmd_verify,
    "inspect": _cmd_inspect,
}


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return _COMMANDS[args.command](args)
    except _DOMAIN_ERRORS as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
