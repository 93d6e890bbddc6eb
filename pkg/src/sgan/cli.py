"""Command-line entry point: ``sgan {run,sweep-n,eval,emit-grid,resume}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import runner
from .config import RunConfig, parse_config
from .ensemble import MODES
from .errors import CheckpointError, ConfigError, TrainingError

log = logging.getLogger("sgan")

EXIT_CONFIG, EXIT_TRAINING, EXIT_CHECKPOINT = 2, 3, 4


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", type=Path, required=config_required, help="YAML run config")
    p.add_argument("--seed", type=int, help="override master_seed")
    p.add_argument("--deterministic", action="store_true", help="run every phase sequentially in order")
    p.add_argument("--out", type=Path, help="output directory (overrides output.dir)")
    p.add_argument("--mode", choices=MODES, help="override the training mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgan", description="Train and evaluate SGAN ensembles on 2-D toy data.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one configuration and write all artifacts")
    _common(p)

    p = sub.add_parser("sweep-n", help="uncovered-mode fraction as a function of ensemble size")
    _common(p)
    p.add_argument("--n-values", type=int, nargs="+", default=[1, 2, 5, 10])
    p.add_argument("--seeds", type=int, nargs="+", help="explicit seed list")
    p.add_argument("--n-seeds", type=int, default=10, help="use seeds 0..n-1 when --seeds is absent")
    p.add_argument("--stub", type=float, metavar="P",
                   help="replace training by generators that miss each mode with probability P")

    p = sub.add_parser("eval", help="recompute metrics from a run's sample dumps")
    p.add_argument("run_dir", type=Path)

    p = sub.add_parser("emit-grid", help="write discriminator level-set grids from a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--config", type=Path, help="config to use instead of the run's config.echo")
    p.add_argument("--resolution", type=int)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("resume", help="continue a run from a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--config", type=Path, help="config to use instead of the run's config.echo")
    p.add_argument("--iterations", type=int, help="new total iteration budget")
    p.add_argument("--allow-config-mismatch", action="store_true")
    return parser


def load_config(args) -> RunConfig:
    cfg = parse_config(args.config)
    return cfg.with_overrides(seed=args.seed, mode=args.mode, deterministic=args.deterministic,
                              out=str(args.out) if args.out is not None else None)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            cfg = load_config(args)
            state = runner.run(cfg, log=log.warning)
            log.info("run finished at iteration %d; artifacts in %s", state.ens.iteration, cfg.output_dir)
        elif args.command == "sweep-n":
            cfg = load_config(args)
            seeds = args.seeds if args.seeds else list(range(args.n_seeds))
            path = runner.sweep_n(cfg, args.n_values, seeds, stub_p=args.stub, log=log.warning)
            for n, mean, se in runner.read_sweep(path):
                print(f"N={n:3d}  uncovered={mean:.4f}  stderr={se:.4f}")
        elif args.command == "eval":
            records = runner.eval_run(args.run_dir)
            log.info("recomputed %d metric records into %s", len(records), args.run_dir / "eval.jsonl")
        elif args.command == "emit-grid":
            cfg = parse_config(args.config) if args.config else None
            paths = runner.emit_grid(args.checkpoint, cfg=cfg, resolution=args.resolution, out=args.out)
            for p in paths:
                print(p)
        elif args.command == "resume":
            cfg = parse_config(args.config) if args.config else None
            state = runner.resume(args.checkpoint, iterations=args.iterations, cfg=cfg,
                                  allow_config_mismatch=args.allow_config_mismatch, log=log.warning)
            log.info("resumed run finished at iteration %d", state.ens.iteration)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except TrainingError as exc:
        log.error("training error: %s", exc)
        return EXIT_TRAINING
    except CheckpointError as exc:
        log.error("checkpoint error: %s", exc)
        return EXIT_CHECKPOINT
    return 0


if __name__ == "__main__":
    sys.exit(main())
