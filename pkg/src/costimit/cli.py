"""Command-line front end.

Subcommands: train (seed fan-out of one algorithm), expert-forge (solve the
constrained task and mint a demonstration dataset), report (aggregate run
directories into a summary table plus figures), and oracle-check (the tabular
validation suite).
"""

from __future__ import annotations

import argparse
import sys

from .config import ALGORITHMS, RunConfig, load_config, parse_config
from .expert import (ExpertSolverConfig, FeasibilityError, forge_expert,
                     save_expert_dataset, summary_block)
from .experiment import run_training, write_summary
from .oracle import run_oracle_checks
from .plots import render_figures


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="costimit",
        description="cost-constrained imitation learning on toy constrained MDPs")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train one algorithm across seeds")
    train.add_argument("--config", help="config file; flags below override it")
    train.add_argument("--algo", choices=ALGORITHMS)
    train.add_argument("--env", choices=("grid", "point"))
    train.add_argument("--seeds", help="e.g. '3', '0,2,5', or '0..4'")
    train.add_argument("--out", help="run root directory")
    train.add_argument("--expert", help="expert dataset path")
    train.add_argument("--iterations", type=int)
    train.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key, repeatable")

    forge = sub.add_parser("expert-forge",
                           help="solve the constrained task and mint a dataset")
    forge.add_argument("--env", choices=("grid", "point"), default="grid")
    forge.add_argument("--budget", type=float, required=True,
                       help="episode cost budget the expert must respect")
    forge.add_argument("--episodes", type=int, default=10)
    forge.add_argument("--seed", type=int, default=0)
    forge.add_argument("--out", required=True, help="dataset file to write")

    report = sub.add_parser("report",
                            help="aggregate run directories; write summary and figures")
    report.add_argument("--out", required=True, help="run root directory")

    oracle = sub.add_parser("oracle-check", help="run the tabular validation suite")
    oracle.add_argument("--seed", type=int, default=0)
    oracle.add_argument("--cases", type=int, default=20)
    return parser


def _train_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.set:
        cfg = parse_config("\n".join(args.set), base=cfg)
    direct = {"algo": args.algo, "env.name": args.env, "run.seeds": args.seeds,
              "run.out": args.out, "expert.path": args.expert,
              "train.iterations": args.iterations}
    lines = [f"{key} = {value}" for key, value in direct.items() if value is not None]
    if lines:
        cfg = parse_config("\n".join(lines), base=cfg)
    return cfg


def _cmd_train(args) -> int:
    cfg = _train_config(args)
    results = run_training(cfg)
    for res in results:
        if res["status"] == "ok":
            final = res["metrics"]["final"]
            print(f"seed {res['seed']}: ok  recovered {final['recovered']:.1f}  "
                  f"violation {final['violation']:.2f}  ({res['run_dir']})")
        else:
            print(f"seed {res['seed']}: FAILED  {res['error']}  ({res['run_dir']})")
    failed = sum(res["status"] != "ok" for res in results)
    print(f"{len(results) - failed}/{len(results)} runs finished under {cfg.run_out}")
    return 1 if failed else 0


def _cmd_forge(args) -> int:
    try:
        dataset, history = forge_expert(args.env, args.budget,
                                        episodes=args.episodes, seed=args.seed,
                                        cfg=ExpertSolverConfig())
    except FeasibilityError as exc:
        print(f"expert forge failed: {exc}", file=sys.stderr)
        print(f"diagnostics: {exc.diagnostics}", file=sys.stderr)
        return 2
    save_expert_dataset(dataset, args.out)
    print(summary_block(dataset))
    print(f"solver iterations: {len(history)}")
    print(f"dataset written to {args.out}")
    return 0


def _cmd_report(args) -> int:
    txt, js = write_summary(args.out)
    figures = render_figures(args.out)
    with open(txt, "r", encoding="utf-8") as fh:
        print(fh.read(), end="")
    print(f"summary table: {txt}")
    print(f"summary data:  {js}")
    for fig in figures:
        print(f"figure:        {fig}")
    return 0


def _cmd_oracle(args) -> int:
    results = run_oracle_checks(seed=args.seed, cases=args.cases)
    for res in results:
        print(f"{'PASS' if res.passed else 'FAIL'}  {res.name}  ({res.detail})")
    bad = sum(not res.passed for res in results)
    print(f"{len(results) - bad}/{len(results)} checks passed")
    return 1 if bad else 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handler = {"train": _cmd_train, "expert-forge": _cmd_forge,
               "report": _cmd_report, "oracle-check": _cmd_oracle}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
