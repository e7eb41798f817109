"""Command-line entry point.

    offmbrl <gen-data|train|eval|ablate|plot> --config <path> [--seed N] [--out DIR]

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys

from offmbrl.config import ExperimentConfig, config_from_dict, load_config
from offmbrl.errors import OffmbrlError


def _load(args) -> ExperimentConfig:
    if args.config:
        return load_config(args.config)
    return config_from_dict({})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="offmbrl",
                                     description="Offline model-based RL pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen-data", help="generate an offline dataset")
    p_gen.add_argument("--config", help="TOML experiment config")
    p_gen.add_argument("--env", help="environment name (overrides config)")
    p_gen.add_argument("--mix", help="behavior mixture name (overrides config)")
    p_gen.add_argument("--n", type=int, help="transition count (overrides config)")
    p_gen.add_argument("--seed", type=int)
    p_gen.add_argument("--out", help="output dataset path")
    p_gen.add_argument("--format", choices=("ofrl", "jsonl"), default="ofrl")

    p_train = sub.add_parser("train", help="train an agent")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--agent", required=True,
                         choices=("tdmpc", "iql-tdmpc", "manager", "worker"))
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--out", help="run output root")
    p_train.add_argument("--manager", help="manager checkpoint (worker intent mode)")
    p_train.add_argument("--resume", help="continue training from a checkpoint")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--seed", type=int)
    p_eval.add_argument("--episodes", type=int)
    p_eval.add_argument("--results", help="results CSV to append to")
    p_eval.add_argument("--manager", help="manager checkpoint (intent workers)")

    p_abl = sub.add_parser("ablate", help="compare none/intent/random workers")
    p_abl.add_argument("--config", required=True)
    p_abl.add_argument("--runs", required=True, help="root holding trained worker runs")
    p_abl.add_argument("--seeds", type=int, nargs="+", required=True)
    p_abl.add_argument("--results", required=True)
    p_abl.add_argument("--manager-root",
                       help="root holding manager runs (per-seed checkpoints)")

    p_plot = sub.add_parser("plot", help="render curves from a CSV")
    p_plot.add_argument("--csv", required=True)
    p_plot.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    from offmbrl import harness

    try:
        if args.command == "gen-data":
            if not args.config and not args.env:
                parser.error("gen-data requires --env (or --config)")
            cfg = _load(args)
            overrides = {}
            if args.env:
                overrides.setdefault("env", {})["name"] = args.env
            ds_over = {}
            if args.mix:
                ds_over["mixture"] = args.mix
            if args.n is not None:
                ds_over["transitions"] = args.n
            if args.seed is not None:
                ds_over["seed"] = args.seed
            if overrides or ds_over:
                data = cfg.to_dict()
                data.setdefault("env", {}).update(overrides.get("env", {}))
                data.setdefault("dataset", {}).update(ds_over)
                cfg = config_from_dict(data)
            path = harness.cmd_gen_data(cfg, out_path=args.out, fmt=args.format)
            print(path)
        elif args.command == "train":
            cfg = _load(args)
            out = harness.cmd_train(cfg, args.agent, seed=args.seed,
                                    out_root=args.out, manager_path=args.manager,
                                    resume=args.resume)
            print(out["checkpoint"])
        elif args.command == "eval":
            cfg = _load(args)
            report = harness.cmd_eval(
                cfg, args.checkpoint, seed=args.seed, results_csv=args.results,
                manager_path=args.manager, episodes=args.episodes,
            )
            print(json.dumps({
                "score_mean": report.score_mean,
                "score_std": report.score_std,
                "success_rate": report.success_rate,
                "episodes": report.episodes,
            }))
        elif args.command == "ablate":
            cfg = _load(args)
            manager_paths = None
            if args.manager_root:
                manager_paths = harness.discover_manager_checkpoints(
                    cfg, args.manager_root, args.seeds
                )
            summary = harness.cmd_ablate(cfg, args.runs, args.seeds, args.results,
                                         manager_paths=manager_paths)
            print(json.dumps(summary["comparisons"], indent=2, sort_keys=True))
        elif args.command == "plot":
            out = harness.cmd_plot(args.csv, args.out)
            print(out)
    except OffmbrlError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
