"""
Main command-line entry point for MetaLab.

Subcommands:
    train <config>                         meta-train, evaluate, write artefacts
    eval <config> --checkpoint <path>      re-evaluate a saved meta-state
    gradcheck                              run the gradient-check suites
    export-curve <checkpoint> --task-seed  dump one sine adaptation curve

This is the only place exceptions are caught; each family maps onto an exit
code (0 ok, 1 invalid configuration, 2 numerical abort or any other
computation error, 3 I/O or checkpoint).
"""
import argparse
import logging
import sys
from typing import Optional, Sequence

import autodiff as ad
import gradcheck
import orchestrator
from config_loader import parse_config
from errors import CheckpointError, ConfigError, MetaLabError, NumericalError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3


def configure_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s - MetaLab - %(levelname)s - %(message)s",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metalab", description="Meta-SGD, MAML and LSTM learning-rate meta-learning experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log at debug level.")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Meta-train, evaluate and write all run artefacts.")
    train.add_argument("config", help="Path to a JSON run config.")
    train.add_argument("--out", help="Output directory (overrides output.dir).")
    train.add_argument("--trace", action="store_true", help="Write a nested call trace to trace.json.")

    evaluate = sub.add_parser("eval", help="Evaluate a saved checkpoint.")
    evaluate.add_argument("config", help="Path to the JSON run config the checkpoint was trained under.")
    evaluate.add_argument("--checkpoint", required=True, help="Path to checkpoint.bin.")
    evaluate.add_argument("--out", help="Directory for eval_summary.csv (defaults to output.dir).")
    evaluate.add_argument("--trace", action="store_true", help="Write a nested call trace to trace.json.")

    check = sub.add_parser("gradcheck", help="Run the gradient-check suites.")
    check.add_argument("--suite", action="append", choices=sorted(gradcheck.SUITES), help="Run only this suite (repeatable).")
    check.add_argument("--inject-sign-fault", metavar="OP", choices=sorted(ad.VJP_RULES), help="Negate one op's vector-Jacobian product (test hook).")

    curve = sub.add_parser("export-curve", help="Export one sine task's pre/post-adaptation curve data.")
    curve.add_argument("checkpoint", help="Path to checkpoint.bin.")
    curve.add_argument("--config", help="Run config (defaults to config.json next to the checkpoint).")
    curve.add_argument("--task-seed", type=int, required=True, help="Seed selecting the sine task.")
    curve.add_argument("--out", help="Output CSV path (defaults to curve_<seed>.csv next to the checkpoint).")
    return parser


def _with_overrides(args: argparse.Namespace):
    cfg = parse_config(args.config)
    output = cfg.output
    if getattr(args, "out", None) and args.command == "train":
        output = output.model_copy(update={"dir": args.out})
    if getattr(args, "trace", False):
        output = output.model_copy(update={"trace": True})
    return cfg.model_copy(update={"output": output})


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "train":
        return orchestrator.run_experiment(_with_overrides(args))
    if args.command == "eval":
        return orchestrator.run_eval(_with_overrides(args), args.checkpoint, args.out)
    if args.command == "gradcheck":
        results = gradcheck.run_gradcheck(args.suite, sign_fault=args.inject_sign_fault)
        print(gradcheck.format_report(results))
        failed = [f"{r.suite} ({r.worst_case})" for r in results if not r.passed]
        if failed:
            logging.critical(f"Gradient check failed: {', '.join(failed)}")
            return EXIT_NUMERICAL
        logging.info("All gradient-check suites passed.")
        return EXIT_OK
    path = orchestrator.export_curve(args.checkpoint, args.task_seed, args.config, args.out)
    print(path)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return _dispatch(args)
    except ConfigError as e:
        logging.critical(f"Invalid configuration: {e}")
        return EXIT_CONFIG
    except NumericalError as e:
        logging.critical(f"Numerical abort: {e}")
        return EXIT_NUMERICAL
    except (CheckpointError, OSError) as e:
        logging.critical(f"I/O failure: {e}")
        return EXIT_IO
    except MetaLabError as e:
        # autodiff shape and domain errors
        logging.critical(f"Computation failed: {type(e).__name__}: {e}")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
