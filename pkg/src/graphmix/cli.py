"""Command-line entry point: train, eval, finetune, verify.

Output locations resolve as: --out flag, else the GRAPHMIX_OUT environment
variable, else the config's io.out_dir. The resolved location is folded
back into the config so the manifest alone reproduces the run.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, restore_into
from .config import ConfigError, load_config, make_env_from_config
from .trainer import build_model, evaluate, finetune, run_training, seed_streams
from .verify import SUITES, run_suite


def _resolve_out(args, cfg) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    env_override = os.environ.get("GRAPHMIX_OUT")
    if env_override:
        return Path(env_override)
    return Path(cfg.io.out_dir)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out_dir = _resolve_out(args, cfg)
    cfg = dataclasses.replace(cfg, io=dataclasses.replace(cfg.io, out_dir=str(out_dir)))
    summary = run_training(cfg, args.seed, out_dir, resume=args.resume)
    final = summary.get("final_eval")
    if final is not None:
        print(f"done: {summary['env_steps']} env steps, {summary['episodes']} episodes, "
              f"final success rate {final.success_rate:.3f}, "
              f"mean return {final.mean_return:.4f}")
    else:
        print(f"done: {summary['env_steps']} env steps (no training requested)")
    return 0


def cmd_eval(args) -> int:
    if args.episodes <= 0:
        print("eval: --episodes must be positive", file=sys.stderr)
        return 2
    cfg = load_config(args.config)
    env = make_env_from_config(cfg.env)
    streams = seed_streams(args.seed)
    model = build_model(env.spec, cfg.model, streams["init"])
    arrays, _ = load_checkpoint(args.checkpoint)
    restore_into(model.params, {k: v for k, v in arrays.items()
                                if not k.startswith("opt/")})
    stats = evaluate(env, model, args.episodes, streams["eval"])
    payload = {"success_rate": stats.success_rate, "mean_return": stats.mean_return,
               "mean_length": stats.mean_length, "episodes": args.episodes,
               "seed": args.seed}
    print(json.dumps(payload))
    out_dir = _resolve_out(args, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eval_stats.json").write_text(json.dumps(payload, indent=2))
    return 0


def cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    source_cfg = load_config(args.source_config) if args.source_config else None
    out_dir = _resolve_out(args, cfg)
    cfg = dataclasses.replace(cfg, io=dataclasses.replace(cfg.io, out_dir=str(out_dir)))
    summary = finetune(args.checkpoint, cfg, args.steps, args.seed, out_dir,
                       source_config=source_cfg)
    before, after = summary["before"], summary["after"]
    print(f"before: success {before.success_rate:.3f}, return {before.mean_return:.4f}")
    print(f"after:  success {after.success_rate:.3f}, return {after.mean_return:.4f}")
    return 0


def cmd_verify(args) -> int:
    report = run_suite(args.suite, seed=args.seed)
    print(json.dumps(report))
    return 0 if report["passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphmix",
                                     description="Graph-based value factorization "
                                                 "for cooperative multi-agent RL")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the training loop")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--out", default=None)
    p_train.add_argument("--resume", action="store_true",
                         help="continue from the latest checkpoint in the output dir")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--episodes", type=int, default=32)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_ft = sub.add_parser("finetune", help="fine-tune a checkpoint on another team size")
    p_ft.add_argument("--checkpoint", required=True)
    p_ft.add_argument("--config", required=True, help="config for the target environment")
    p_ft.add_argument("--source-config", default=None,
                      help="config the checkpoint was trained with, for dimension checks")
    p_ft.add_argument("--steps", type=int, required=True)
    p_ft.add_argument("--seed", type=int, default=0)
    p_ft.add_argument("--out", default=None)
    p_ft.set_defaults(func=cmd_finetune)

    p_ver = sub.add_parser("verify", help="run a 64-bit property suite")
    p_ver.add_argument("--suite", required=True, choices=SUITES)
    p_ver.add_argument("--seed", type=int, default=0)
    p_ver.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
