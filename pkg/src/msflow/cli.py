"""Command-line entry point: train, solve, ablate, report."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .harness import cmd_ablate, cmd_report, cmd_solve, cmd_train, load_config


def build_parser():
    p = argparse.ArgumentParser(prog="msflow")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--out", required=True, type=Path)
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config's top-level seed")
        sp.add_argument("--threads", type=int, default=1)
        if checkpoint:
            sp.add_argument("--checkpoint", required=True, type=Path)
            sp.add_argument("--solver", default=None,
                            help="override the config's solver choice")

    common(sub.add_parser("train", help="train a flow model"))
    common(sub.add_parser("solve", help="solve an inverse problem"), checkpoint=True)
    common(sub.add_parser("ablate", help="run a parameter grid"), checkpoint=True)
    rp = sub.add_parser("report", help="summarize a solve output directory")
    rp.add_argument("--out", required=True, type=Path)
    return p


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "solver", None):
        cfg = replace(cfg, solver=args.solver)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cmd_train(_load(args), args.out)
        elif args.command == "solve":
            cmd_solve(_load(args), args.checkpoint, args.out)
        elif args.command == "ablate":
            cmd_ablate(_load(args), args.checkpoint, args.out, threads=args.threads)
        elif args.command == "report":
            cmd_report(args.out)
    except Exception as e:
        record = {"error": type(e).__name__, "message": str(e)}
        print(json.dumps(record), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
