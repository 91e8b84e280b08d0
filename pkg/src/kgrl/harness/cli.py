"""Command-line entry point: ``train``, ``eval``, ``transfer`` and ``inspect``.

Outputs go under ``$KGRL_OUTPUT_ROOT`` (default ``./runs``). Exit status is 0
on success, 2 for invalid input and 3 for failures during a run.
"""
import argparse
import json
import os
from pathlib import Path
import sys

from ..envs import ConfigError, TASK_IDS, task_spec
from ..incremental import ExpansionError, GroupRunError, TransferError, initial_knowledge, run_group
from ..learner import Trainer
from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    policy_from_checkpoint,
    read_manifest,
    save_checkpoint,
    trainer_checkpoint,
)
from .config import ConfigValidationError, load_group_config, load_run_config
from .evaluate import EvalError, run_episodes, summarize, write_episodes

OUTPUT_ROOT_ENV = "KGRL_OUTPUT_ROOT"
EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3

_VALIDATION_ERRORS = (ConfigValidationError, ConfigError, EvalError, TransferError, ExpansionError, CheckpointError)


def output_root():
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def cmd_train(args):
    cfg = load_run_config(args.config)
    out = output_root() / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    metrics = out / "metrics.csv"
    if metrics.exists():
        metrics.unlink()
    knowledge = initial_knowledge(cfg.knowledge, cfg.seed, cfg.learner.d_k)
    trajectory = out / "trajectory.csv" if cfg.trajectory_dump else None
    trainer = Trainer(cfg.task, cfg.learner, cfg.seed, knowledge=knowledge, metrics_path=metrics,
                      trajectory_path=trajectory)

    def save(tr, name=None):
        meta, blocks = trainer_checkpoint(tr)
        return save_checkpoint(out / (name or f"step_{tr.step_count:08d}.ckpt"), meta, blocks)

    try:
        trainer.run(on_checkpoint=save)
    except Exception:
        save(trainer, "last.ckpt")
        raise
    finally:
        trainer.close()
    digest = save(trainer, "final.ckpt")
    best = trainer.best_success
    print(f"trained {cfg.task.task_id} for {trainer.step_count} steps; best eval success {best:.2f}")
    print(f"checkpoint {out / 'final.ckpt'} sha256 {digest}")
    return EXIT_OK


def cmd_eval(args):
    if args.task not in TASK_IDS:
        raise EvalError(f"unknown task {args.task!r}")
    if args.episodes <= 0:
        raise EvalError("--episodes must be positive")
    ckpt = load_checkpoint(args.checkpoint)
    policy = policy_from_checkpoint(ckpt)
    spec = task_spec(args.task)
    results = run_episodes(policy, spec, args.episodes, args.seed)
    success, mean_return = summarize(results)
    out = output_root()
    out.mkdir(parents=True, exist_ok=True)
    path = Path(args.out) if args.out else out / f"eval_{args.task}_seed{args.seed}.csv"
    write_episodes(path, results)
    print(f"success_rate={success:.4f} mean_return={mean_return:.4f} episodes={args.episodes} csv={path}")
    return EXIT_OK


def cmd_transfer(args):
    group = load_group_config(args.group_config)
    out = output_root() / group.name
    lineage = run_group(group, out)
    for e in lineage.entries:
        print(f"{e['task_id']}: {e['checkpoint']} sha256 {e['checkpoint_hash']}")
    print(f"lineage {out / 'lineage.json'}")
    return EXIT_OK


def cmd_inspect(args):
    header = read_manifest(args.checkpoint)
    print(json.dumps(header, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="kgrl", description="Knowledge-guided RL on kinematic surgical-analog tasks.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="train one task from a config file")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint on a task")
    p.add_argument("checkpoint")
    p.add_argument("task")
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="per-episode CSV path (default under the output root)")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("transfer", help="run an incremental group of tasks")
    p.add_argument("group_config")
    p.set_defaults(func=cmd_transfer)
    p = sub.add_parser("inspect", help="print a checkpoint's manifest")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except GroupRunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # runtime failure inside a run
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
