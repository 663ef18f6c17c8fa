"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 numeric failure (non-finite loss,
failed gradient check), 3 I/O or checkpoint error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .checkpoint import CheckpointError
from .config import UsageError, build_config, resolve_out_dir, save_config
from .gradcheck import run_all
from .plotting import plot_metrics
from .tensor import NumericError
from .train import (build_reward, eval_policy, get_templates, load_model,
                    pretrain, rl_train, run_ablation)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exceptions instead of exiting."""

    def error(self, message):
        raise UsageError(message)


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, repeatable")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--quiet", action="store_true")


def build_parser() -> _Parser:
    parser = _Parser(prog="margrid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="denoising pretraining from scratch")
    _add_config_args(p)

    p = sub.add_parser("train", help="policy post-training from a base checkpoint")
    _add_config_args(p)
    p.add_argument("--base", required=True, help="pretrained checkpoint path")

    p = sub.add_parser("eval", help="reward statistics for a checkpoint")
    _add_config_args(p)
    p.add_argument("--ckpt", required=True, help="checkpoint to evaluate")
    p.add_argument("--samples", type=int, default=None, help="samples per class")
    p.add_argument("--tag", default="eval", help="stream tag for eval draws")

    p = sub.add_parser("ablate", help="matched-seed sweep along one axis")
    _add_config_args(p)
    p.add_argument("--base", required=True, help="pretrained checkpoint path")
    p.add_argument("--axis", required=True,
                   choices=["head-mode", "s", "k_percent", "tau"])

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("plot", help="render curves from a metrics file")
    p.add_argument("metrics", help="metrics JSONL path")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--stem", default="curves")
    return parser


def _save_run_config(cfg, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    save_config(cfg, os.path.join(out_dir, "config.txt"))


def _run(args) -> int:
    if args.command == "gradcheck":
        _, _, ok = run_all(seed=args.seed, tol=args.tol, quiet=args.quiet)
        return 0 if ok else 2

    if args.command == "plot":
        paths = plot_metrics(args.metrics, args.out, stem=args.stem)
        print("\n".join(paths))
        return 0

    cfg = build_config(args.config, args.set)
    cfg.validate()

    if args.command == "pretrain":
        out = resolve_out_dir(args.out, "pretrain")
        _save_run_config(cfg, out)
        summary = pretrain(cfg, out, quiet=args.quiet)
        print(json.dumps(summary, sort_keys=True))
        return 0

    if args.command == "train":
        out = resolve_out_dir(args.out, "train")
        _save_run_config(cfg, out)
        summary = rl_train(cfg, out, args.base, quiet=args.quiet)
        print(json.dumps(summary, sort_keys=True))
        return 0

    if args.command == "eval":
        model, _, _ = load_model(args.ckpt)
        reward_model = build_reward(cfg, get_templates(cfg))
        report = eval_policy(model, cfg, reward_model, eval_tag=args.tag,
                             samples_per_class=args.samples)
        print(json.dumps(report, sort_keys=True))
        return 0

    if args.command == "ablate":
        out = resolve_out_dir(args.out, f"ablate_{args.axis}")
        _save_run_config(cfg, out)
        rows = run_ablation(cfg, args.axis, out, args.base, quiet=args.quiet)
        print(json.dumps(rows, sort_keys=True))
        return 0

    raise UsageError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _run(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, OSError, ValueError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
