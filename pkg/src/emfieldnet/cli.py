"""Command-line entry point: ``gen``, ``train``, ``eval``, ``physcheck``, ``info``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .container import ContainerError, read_container, read_header
from .metrics import DataMismatchError, evaluate, physcheck
from .oracle import DatasetSpec, generate_dataset
from .training import (
    LossSpec, NumericalAbort, OptimSpec, TrainState, checkpoint_extra, train,
)
from .unet import ArchSpec, load_checkpoint, read_checkpoint_header, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="emfieldnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate synthetic train/test containers from a JSON spec")
    g.add_argument("spec", help="DatasetSpec JSON file")
    g.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", help="train a U-Net on a container")
    t.add_argument("--train", required=True, help="training container")
    t.add_argument("--out", help="final checkpoint path")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--depth", type=int, default=2)
    t.add_argument("--base-width", type=int, default=8)
    t.add_argument("--kernel", type=int, default=3)
    t.add_argument("--convs-per-block", type=int, default=2)
    t.add_argument("--lambda-gauss", type=float, default=1.0)
    t.add_argument("--lambda-faraday", type=float, default=0.0)
    t.add_argument("--lambda-ampere", type=float, default=0.0)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--beta1", type=float, default=0.9)
    t.add_argument("--beta2", type=float, default=0.999)
    t.add_argument("--eps", type=float, default=1e-8)
    t.add_argument("--batch-size", type=int, default=2)
    t.add_argument("--steps", type=int, default=100)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--no-shuffle", action="store_true")
    t.add_argument("--checkpoint-dir")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--log-every", type=int, default=10)
    t.add_argument("--history", help="write loss history as JSON lines")

    e = sub.add_parser("eval", help="evaluate a checkpoint against a test container")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--json", help="write the report JSON here")

    c = sub.add_parser("physcheck", help="audit Maxwell residuals of a container's fields")
    c.add_argument("container")
    c.add_argument("--fine", help="same samples at half the spacing, for a convergence check")
    c.add_argument("--json", help="write the report JSON here")

    i = sub.add_parser("info", help="print a container or checkpoint header")
    i.add_argument("path")
    return p


def _cmd_gen(args) -> int:
    spec = DatasetSpec.from_json(args.spec)
    train_path, test_path = generate_dataset(spec, args.out)
    n_train, n_test = spec.split_sizes()
    print(f"wrote {train_path} ({n_train} samples) and {test_path} ({n_test} samples)")
    return EXIT_OK


def _cmd_train(args) -> int:
    records = read_container(args.train)
    loss = LossSpec(args.lambda_gauss, args.lambda_faraday, args.lambda_ampere)
    optim = OptimSpec(args.lr, args.beta1, args.beta2, args.eps, args.batch_size, args.steps,
                      args.seed, not args.no_shuffle, args.checkpoint_every, args.log_every)
    state, arch = None, None
    if args.resume:
        state = TrainState.from_checkpoint(load_checkpoint(args.resume))
    else:
        arch = ArchSpec(records[0].input_stack().shape[0], depth=args.depth,
                        base_width=args.base_width, kernel=args.kernel,
                        convs_per_block=args.convs_per_block)
    hist = open(args.history, "a") if args.history else None
    try:
        def on_step(rec):
            if hist:
                hist.write(json.dumps(rec) + "\n")
                hist.flush()
        state = train(records, loss, optim, arch, state=state,
                      checkpoint_dir=args.checkpoint_dir, on_step=on_step)
    finally:
        if hist:
            hist.close()
    if args.out:
        save_checkpoint(args.out, state.to_checkpoint(checkpoint_extra(loss, optim, state)))
    last = state.history[-1] if state.history else {}
    print(json.dumps({"steps": state.step, "last": last}))
    return EXIT_OK


def _cmd_eval(args) -> int:
    report = evaluate(args.checkpoint, args.data)
    if args.json:
        Path(args.json).write_text(report.to_json())
    print(report.to_table())
    return EXIT_OK


def _cmd_physcheck(args) -> int:
    rep = physcheck(args.container, args.fine)
    text = json.dumps(rep, indent=2)
    if args.json:
        Path(args.json).write_text(text)
    print(text)
    return EXIT_OK


def _cmd_info(args) -> int:
    with open(args.path, "rb") as f:
        magic = f.read(4)
    if magic == b"EMW1":
        header = read_checkpoint_header(args.path)
        header.get("extra", {}).pop("history", None)
    else:
        header = read_header(args.path)
        header.pop("samples", None)
    print(json.dumps(header, indent=2))
    return EXIT_OK


COMMANDS = {"gen": _cmd_gen, "train": _cmd_train, "eval": _cmd_eval,
            "physcheck": _cmd_physcheck, "info": _cmd_info}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContainerError, DataMismatchError, OSError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
