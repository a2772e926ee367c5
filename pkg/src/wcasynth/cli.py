"""``wcasynth`` command line.

Exit codes: 0 success, 2 configuration error, 3 I/O or checkpoint error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .errors import CheckpointError, ConfigError, NumericalError
from .io import Config, load_config, preset, validate_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

log = logging.getLogger("wcasynth")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wcasynth", description="Geometry-controlled diffusion on synthetic map tiles.")
    sub = p.add_subparsers(dest="command", required=True)
    specs = {
        "train": "train the configured variant; writes a checkpoint and loss.csv",
        "sample": "generate images from a checkpoint; writes PPMs and index.json",
        "eval": "FID and alignment table over held-out tiles, one checkpoint per variant",
        "bench": "runtime, size, peak memory and FLOP table per variant",
        "dataset": "export the synthetic dataset as paired PPMs",
    }
    for name, help_text in specs.items():
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", help="JSON config file (default: the toy preset)")
        s.add_argument("--preset", choices=["toy", "paper-protocol"], help="start from a named preset")
        s.add_argument("--checkpoint", action="append", default=[],
                       help="checkpoint path (output for train; repeat for eval/bench)")
        s.add_argument("--out", help="output directory (overrides paths.out_dir)")
        s.add_argument("--seed", type=int, help="seed override")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> Config:
    if args.config and args.preset:
        raise ConfigError("use either --config or --preset, not both")
    cfg = load_config(args.config) if args.config else preset(args.preset or "toy")
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        if args.command == "train":
            cfg.training.seed = args.seed
        elif args.command == "dataset":
            cfg.dataset.base_seed = args.seed
        else:
            cfg.sampling.seed = args.seed
    if args.out:
        cfg.paths.out_dir = args.out
    validate_config(cfg)
    return cfg


def dispatch(args, cfg: Config) -> None:
    cmd, ckpts = args.command, args.checkpoint
    if cmd == "train":
        if len(ckpts) > 1:
            raise ConfigError("train writes a single checkpoint")
        res = pipeline.run_train(cfg, checkpoint=ckpts[0] if ckpts else None)
        print(f"checkpoint {res.checkpoint}\nloss curve {res.loss_csv}")
    elif cmd == "sample":
        if len(ckpts) != 1:
            raise ConfigError("sample needs exactly one --checkpoint")
        print(f"index {pipeline.run_sample(cfg, ckpts[0])}")
    elif cmd == "eval":
        res = pipeline.run_eval(cfg, ckpts)
        for row in res["rows"]:
            print(f"{row['method']:<24} fid {row['fid']:10.4f}  mean_iou {row['mean_iou']:.4f}")
    elif cmd == "bench":
        for row in pipeline.run_bench(cfg, ckpts):
            print(", ".join(f"{k}={v}" for k, v in row.items()))
    else:
        print(f"index {pipeline.run_dataset(cfg)}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        dispatch(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
