"""Command-line entry point: synth, train, eval, gradcheck, kernelcheck.

Exit codes: 0 success, 1 verification failure, 2 usage or format error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .data import load_dataset, synth_generate
from .errors import ContractError, DimensionError, FormatError, NumericError, ProtocolError
from .train import eval_checkpoint, train
from .verify import KERNEL_TOL, format_gradcheck, run_gradcheck, run_kernelcheck, timed

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mssosn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the synthetic texture dataset")
    p.add_argument("--classes", type=_positive, required=True)
    p.add_argument("--per-class", type=_positive, required=True)
    p.add_argument("--res", type=_positive, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale-confounded", action="store_true")

    p = sub.add_parser("train", help="episodic training from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="test accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--episodes", type=_positive, default=None)

    sub.add_parser("gradcheck", help="finite-difference check of every op and three composites")
    sub.add_parser("kernelcheck", help="polynomial-kernel linearisation check, 100 trials")
    return parser


def _cmd_synth(args) -> int:
    out = synth_generate(args.out, args.classes, args.per_class, args.res, args.seed, args.scale_confounded)
    print(f"wrote {args.classes} x {args.per_class} images to {out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    result = train(cfg, load_dataset(args.data), args.out)
    last = result.rows[-1] if result.rows else {}
    print(f"metrics: {result.metrics_path}")
    print(f"checkpoint: {result.checkpoint_path}")
    if last:
        print(f"final episode L_total {last['L_total']:.6f}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    mean, half = eval_checkpoint(args.checkpoint, load_dataset(args.data), args.episodes)
    print(f"accuracy {mean:.2f} +- {half:.2f}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    results, secs = timed(run_gradcheck)
    print(format_gradcheck(results))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed in {secs:.1f}s")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_FAIL
    return EXIT_OK


def _cmd_kernelcheck(args) -> int:
    worst, secs = timed(run_kernelcheck)
    ok = worst < KERNEL_TOL
    print(f"max |oracle - pairing| = {worst:.3e} over 100 trials ({secs:.3f}s): {'ok' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "kernelcheck": _cmd_kernelcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (FormatError, ContractError, DimensionError, ProtocolError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
