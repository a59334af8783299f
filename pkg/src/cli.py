"""
Command-line surface: dataset generation, training, evaluation, accounting,
gradient checking, multi-seed runs and serving.

Usage:
    python -m src.cli gen-data --spec data.cfg --out data.mvad
    python -m src.cli train --config run.cfg --data data.mvad --out task.mvck
    python -m src.cli eval --ckpt task.mvck --data data.mvad
    python -m src.cli params --clip-b16
    python -m src.cli storage --tasks 5 --ratio 0.025

Standard output carries only the machine-readable result; logs go to stderr.
Exit codes: 0 success, 1 check failed or bad input, 2 missing file, 3 config error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from src.config.run_config import ConfigError, RunConfig, documented_keys
from src.config.settings import settings

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_MISSING_FILE = 2
EXIT_CONFIG = 3


def _existing(path: Optional[str]) -> Optional[Path]:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(path)
    return p


def _load_config(path: Optional[str]) -> RunConfig:
    p = _existing(path)
    return RunConfig.from_file(p) if p is not None else RunConfig()


def _emit(lines: List[str]) -> None:
    for line in lines:
        print(line)


def cmd_gen_data(args) -> int:
    from src.services.synthdata import write_dataset

    spec = _load_config(args.spec).data
    write_dataset(spec, Path(args.out))
    return EXIT_OK


def cmd_train(args) -> int:
    from src.services.checkpoint import save_checkpoint
    from src.services.synthdata import load_dataset
    from src.services.trainer import train

    config = _load_config(args.config)
    dataset = load_dataset(_existing(args.data))
    train_samples, _ = dataset.split()
    log_file = open(args.log, "w", encoding="utf-8") if args.log else None

    def on_step(record):
        line = record.to_line()
        print(line)
        if log_file is not None:
            log_file.write(line + "\n")

    try:
        result = train(config, train_samples, on_step=on_step, max_steps=args.max_steps)
    finally:
        if log_file is not None:
            log_file.close()
    save_checkpoint(result.state, Path(args.out))
    return EXIT_OK


def cmd_eval(args) -> int:
    from src.services.checkpoint import load_checkpoint
    from src.services.synthdata import load_dataset
    from src.services.trainer import evaluate

    state = load_checkpoint(_existing(args.ckpt))
    dataset = load_dataset(_existing(args.data))
    samples = dataset.samples if args.all else dataset.split()[1]
    _emit(evaluate(state, samples).lines())
    return EXIT_OK


def cmd_params(args) -> int:
    from src.services.accounting import count_params

    config = RunConfig.clip_b16() if args.clip_b16 else _load_config(args.config)
    _emit(count_params(config).to_lines())
    return EXIT_OK


def cmd_storage(args) -> int:
    from src.services.accounting import format_units, full_finetune_storage, storage_report

    if args.full_finetune:
        print(format_units(full_finetune_storage(args.tasks)))
    else:
        print(format_units(storage_report(args.tasks, args.ratio)))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from src.services.gradcheck import model_gradcheck

    config = _load_config(args.config)
    samples = args.samples if args.samples > 0 else None
    err = model_gradcheck(config, eps=args.eps, samples=samples)
    print(f"max_rel_err {err:.3e}")
    if err > args.tolerance:
        logger.error(f"Gradient check failed: {err:.3e} > {args.tolerance:.1e}")
        return EXIT_FAILED
    return EXIT_OK


def cmd_seeds(args) -> int:
    from src.services.synthdata import load_dataset
    from src.services.trainer import train_multiseed

    config = _load_config(args.config)
    dataset = load_dataset(_existing(args.data))
    train_samples, test_samples = dataset.split()
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    _emit(train_multiseed(config, train_samples, test_samples, seeds).lines())
    return EXIT_OK


def cmd_keys(args) -> int:
    for key, default, description in documented_keys():
        print(f"{key} = {default}" + (f"  # {description}" if description else ""))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from src.api import routes
    from src.main import app
    from src.services.task_registry import TaskRegistry

    routes.registry = TaskRegistry.from_directory(Path(args.checkpoints), _existing(args.data))
    uvicorn.run(app, host=args.host, port=args.port, log_level=settings.LOG_LEVEL.lower())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vtadapter", description="Video-text adapter toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    p.add_argument("--spec", help="key = value file with data.* keys")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train adapters on the dataset's train split")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="also write the step log to this file")
    p.add_argument("--max-steps", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--all", action="store_true", help="use every sample instead of the test split")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="parameter report")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--config")
    group.add_argument("--clip-b16", action="store_true")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("storage", help="deployment storage units")
    p.add_argument("--tasks", type=int, required=True)
    p.add_argument("--ratio", type=float, default=0.0)
    p.add_argument("--full-finetune", action="store_true")
    p.set_defaults(func=cmd_storage)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--config")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--samples", type=int, default=settings.GRADCHECK_SAMPLES,
                   help="scalars checked per tensor (seeded choice); 0 checks all")
    p.add_argument("--tolerance", type=float, default=settings.GRADCHECK_TOLERANCE)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("seeds", help="train and evaluate over several seeds")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", default="0,42,123,2022")
    p.set_defaults(func=cmd_seeds)

    p = sub.add_parser("keys", help="list configuration keys and defaults")
    p.set_defaults(func=cmd_keys)

    p = sub.add_parser("serve", help="serve task checkpoints over HTTP")
    p.add_argument("--checkpoints", default=settings.SERVE_CHECKPOINT_DIR)
    p.add_argument("--data", default=settings.SERVE_DATA_PATH)
    p.add_argument("--host", default=settings.SERVE_HOST)
    p.add_argument("--port", type=int, default=settings.SERVE_PORT)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=settings.LOG_LEVEL.upper(),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        path = e.filename or (e.args[0] if e.args else "")
        print(f"error: file not found: {path}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except ConfigError as e:
        print(f"error: invalid config key {e.key}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
