"""Command-line entry point: generate | train | eval | ablate | heatmap | scan."""

import argparse
import logging
import os
import sys

from config import (
    BEST_CHECKPOINT_NAME, DEFAULT_BALANCE_WEIGHT, EXIT_CODES, TABLE_BALANCE_WEIGHT, THREADS_ENV_VAR,
)

logger = logging.getLogger("Main")


def apply_thread_limit() -> None:
    """Cap BLAS threads from MOEMIL_THREADS; must run before numpy is imported."""
    threads = os.environ.get(THREADS_ENV_VAR)
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = threads


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moemil",
        description="Multi-resolution MoE-Mamba multiple-instance learning on bags of patch features.",
    )
    parser.add_argument("--config", help="run config JSON; flags override its keys")
    parser.add_argument("--seed", type=int, help="seed for every random stream of the run")
    parser.add_argument("--out", help="output directory (run artifacts or generated dataset)")
    parser.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    generate = sub.add_parser("generate", help="write a synthetic dataset (MBAG files + manifest)")
    generate.add_argument("--classes", type=int)
    generate.add_argument("--slides-per-class", type=int)

    train = sub.add_parser("train", help="train a model on the train split of a manifest")
    train.add_argument("--manifest")
    train.add_argument("--variant", help="full | wo-r | wo-moe | moeffn")
    train.add_argument("--epochs", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--lambda-balance", type=float,
                       help=f"load-balance weight (default {DEFAULT_BALANCE_WEIGHT}; "
                            f"the hyperparameter table lists {TABLE_BALANCE_WEIGHT})")
    train.add_argument("--resume", action="store_true", help="continue from last.mckp in --out")

    evaluate = sub.add_parser("eval", help="metrics of a checkpoint on one split")
    evaluate.add_argument("--checkpoint")
    evaluate.add_argument("--manifest")
    evaluate.add_argument("--split", default="test", choices=("train", "val", "test"))

    ablate = sub.add_parser("ablate", help="compare variants or sweep one hyperparameter")
    ablate.add_argument("--manifest")
    ablate.add_argument("--variants", nargs="+")
    ablate.add_argument("--seeds", nargs="+", type=int)
    ablate.add_argument("--sweep", choices=("variant", "layers", "topk", "lambda", "scan"))
    ablate.add_argument("--values", nargs="+")
    ablate.add_argument("--epochs", type=int)
    ablate.add_argument("--lr", type=float)
    ablate.add_argument("--lambda-balance", type=float)

    heatmap = sub.add_parser("heatmap", help="per-level attention heatmaps for one bag")
    heatmap.add_argument("--checkpoint")
    heatmap.add_argument("--bag")

    scan = sub.add_parser("scan", help="print both scan orders of a bag")
    scan.add_argument("--bag")
    return parser


def run(args: argparse.Namespace) -> int:
    from app import commands
    from app.utils.config_utils import apply_overrides, load_run_config
    from packages.helpers.errors import ContractError
    from packages.helpers.log_setup import setup_logging

    flags = vars(args).copy()
    if args.command == "generate":
        flags["data"] = flags.pop("out")
    cfg = apply_overrides(load_run_config(args.config), flags)

    level = logging.DEBUG if args.verbose else logging.INFO
    log_file = os.path.join(cfg.paths.out, "run.log") if args.command in ("train", "ablate") else None
    setup_logging(level, log_file)

    if args.command == "generate":
        commands.cmd_generate(cfg, force=args.force)
    elif args.command == "train":
        commands.cmd_train(cfg, resume=args.resume)
    elif args.command == "eval":
        checkpoint = cfg.paths.checkpoint or os.path.join(cfg.paths.out, BEST_CHECKPOINT_NAME)
        commands.cmd_eval(checkpoint, cfg.paths.manifest_path(), args.split)
    elif args.command == "ablate":
        commands.cmd_ablate(cfg, variants=args.variants, seeds=args.seeds, sweep=args.sweep, values=args.values)
    elif args.command == "heatmap":
        if not cfg.paths.bag:
            raise ContractError("heatmap needs --bag")
        checkpoint = cfg.paths.checkpoint or os.path.join(cfg.paths.out, BEST_CHECKPOINT_NAME)
        commands.cmd_heatmap(checkpoint, cfg.paths.bag, cfg.paths.out)
    elif args.command == "scan":
        if not cfg.paths.bag:
            raise ContractError("scan needs --bag")
        commands.cmd_scan(cfg.paths.bag)
    return EXIT_CODES["success"]


def main(argv=None) -> int:
    """
    Parse arguments and run one command.

    Returns:
        int: 0 on success, 2 for config/contract errors, 3 for IO/format
            errors, 4 for numeric errors, 1 for anything unexpected
    """
    apply_thread_limit()
    args = build_parser().parse_args(argv)
    from packages.helpers.errors import MoeMilError
    try:
        return run(args)
    except MoeMilError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return EXIT_CODES["unexpected"]


if __name__ == "__main__":
    sys.exit(main())
