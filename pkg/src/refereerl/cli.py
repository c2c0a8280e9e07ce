"""Command line: train, eval, ablate, analyze and init.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .config import RunConfig, check_ablation, load_run_config
from .craftworld import TaskTarget
from .errors import ConfigError, UsageError
from .trainer import REWARD_MODES, TrainingError

log = logging.getLogger("refereerl")


def _common_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="run configuration TOML (defaults built in when omitted)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE",
                   help="dotted-path override, e.g. train.lr=1e-3 (repeatable)")
    p.add_argument("--reward-mode", choices=REWARD_MODES, help="shorthand for train.reward_mode")
    p.add_argument("--seed", type=int, help="shorthand for train.seed")
    p.add_argument("--target", help="shorthand for env.target")
    p.add_argument("--iterations", type=int, help="shorthand for train.iterations")
    p.add_argument("--output-dir", type=Path, help="shorthand for run.output_dir")


def _load(args) -> RunConfig:
    overrides = list(args.overrides)
    shorthands = {
        "reward_mode": "train.reward_mode",
        "seed": "train.seed",
        "target": "env.target",
        "iterations": "train.iterations",
        "output_dir": "run.output_dir",
    }
    for attr, path in shorthands.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        if isinstance(value, (str, Path)):
            value = '"' + Path(value).as_posix() + '"' if isinstance(value, Path) else f'"{value}"'
        overrides.append(f"{path}={value}")
    return load_run_config(args.config, overrides)


def cmd_train(args) -> int:
    from .experiments import execute_run
    from .plotting import plot_training
    from .trainer import METRIC_COLUMNS

    cfg = _load(args)
    record = execute_run(cfg, evaluate=not args.no_eval)
    if not args.no_plot:
        with record.metrics_path.open() as fh:
            rows = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
        if rows and set(METRIC_COLUMNS) <= set(rows[0]):
            plot_training(rows, record.directory / "training.png")
    print(f"run {record.run_id} -> {record.directory}")
    if record.eval_success_rate is not None:
        lo, hi = record.eval_interval
        print(f"eval success {record.eval_success_rate:.3f} (95% CI {lo:.3f}-{hi:.3f}, {cfg.run.eval_episodes} episodes)")
    return 0


def cmd_eval(args) -> int:
    from .experiments import wilson_interval, world_from_meta
    from .policy import ActorCritic
    from .trainer import evaluate_policy

    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    if not args.checkpoint.is_file():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    policy, meta = ActorCritic.load(args.checkpoint)
    if args.config is not None:
        cfg = load_run_config(args.config, args.overrides)
        world = cfg.world()
        default_target = cfg.target
    else:
        world = world_from_meta(meta)
        default_target = TaskTarget(meta.get("target", "stick"), int(meta.get("target_count", 1)))
    if policy.obs_dim != world.obs_dim or policy.skills != world.skills:
        raise ConfigError(
            f"checkpoint expects {policy.obs_dim} inputs over {len(policy.skills)} skills; "
            f"environment provides {world.obs_dim} over {len(world.skills)}"
        )
    target = TaskTarget(args.target) if args.target else default_target
    trace_dir = args.trace_dir or args.checkpoint.parent / f"eval-{target.target_item}"
    rep = evaluate_policy(world, policy, target, args.episodes, args.seed, args.mode, trace_dir)
    lo, hi = wilson_interval(rep.successes, rep.episodes)
    print(f"target {target.target_item}: {rep.successes}/{rep.episodes} successes, "
          f"rate {rep.success_rate:.3f} (95% Wilson {lo:.3f}-{hi:.3f}); traces in {trace_dir}")
    summary = Path(trace_dir) / "summary.csv"
    with summary.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["target", "episodes", "successes", "success_rate", "wilson_low", "wilson_high"])
        w.writerow([target.target_item, rep.episodes, rep.successes, repr(rep.success_rate), repr(lo), repr(hi)])
    return 0


def cmd_ablate(args) -> int:
    from .experiments import new_run_dir, run_ablation
    from .plotting import plot_ablation

    cfg = _load(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(cfg.ablate.seeds)
    if len(seeds) < 2:
        raise UsageError("ablate needs at least two seeds")
    if args.tasks:
        cfg.ablate.tasks = args.tasks.split(",")
    check_ablation(cfg)
    root = Path(cfg.run.output_dir)
    _, out = new_run_dir(root, seeds[0])
    (out / "config.toml").write_text(cfg.dumps())

    def progress(c):
        shown = "FAILED" if c.success_rate is None else f"{c.success_rate:.3f}"
        print(f"  {c.task:>16} {c.mode:>7} seed {c.seed}: {shown}", flush=True)

    table = run_ablation(cfg, seeds, out, progress)
    table.write_cells_csv(out / "cells.csv")
    table.write_csv(out / "table.csv")
    (out / "table.md").write_text(table.markdown())
    if not args.no_plot:
        cells = {m: {t: table.rates(m, t) for t in table.tasks} for m in table.modes}
        plot_ablation(cells, table.tasks, out / "ablation.png")
    print(table.markdown())
    print(f"results in {out}")
    return 1 if table.any_failed else 0


def cmd_analyze(args) -> int:
    from .analysis import closed_form_profile, decay_rank_correlation, empirical_vanishment
    from .referee import OracleReferee
    from .plotting import plot_vanishment

    gl = args.gamma * args.lam
    if not 0 < gl < 1:
        raise ConfigError(f"gamma * lam must lie in (0, 1), got {gl}")
    if args.max_offset < 0:
        raise UsageError("--max-offset must be >= 0")
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    prof = closed_form_profile(args.gamma, args.lam, args.reward, args.max_offset)
    prof.write_csv(out / "closed_form.csv", series="closed")
    prof.write_csv(out / "converged_gae.csv", series="gae")
    profiles = [prof]
    print(f"closed form: offset 0 -> {prof.closed_form[0]!r}, offset {args.max_offset} -> {prof.closed_form[-1]!r}")
    if args.empirical:
        cfg = load_run_config(args.config, args.overrides)
        world = cfg.world()
        target = TaskTarget(args.empirical)
        world.check_target(target)
        for mode in ("ER", "ER+AR4"):
            p = empirical_vanishment(
                world, target, args.gamma, args.lam,
                critic_epochs=args.critic_epochs, episodes=args.episodes,
                referee=OracleReferee(world, cfg.referee.rewards) if mode == "ER+AR4" else None,
                seed=args.seed, policy_config=cfg.policy, label=f"{mode} (measured)",
                min_count=args.min_count,
            )
            if p.empty:
                print(f"{mode}: no successful episodes within budget")
                continue
            name = "empirical_" + mode.replace("+", "_") + ".csv"
            p.write_csv(out / name)
            print(f"{mode}: {p.episodes_used} successful episodes, rank correlation with closed form "
                  f"{decay_rank_correlation(p):.3f} -> {name}")
            profiles.append(p)
    if not args.no_plot:
        plot_vanishment(profiles, out / "vanishment.png")
    print(f"written to {out}")
    return 0


def cmd_init(args) -> int:
    from .experiments import checkpoint_meta
    from .policy import ActorCritic

    cfg = _load(args)
    world = cfg.world()
    policy = ActorCritic(world.obs_dim, world.skills, cfg.policy, seed=cfg.train.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    policy.save(args.out, checkpoint_meta(cfg, iteration=0))
    print(f"random-weights checkpoint -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refereerl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one policy and persist the run directory")
    _common_config_args(p)
    p.add_argument("--no-eval", action="store_true", help="skip the post-training evaluation")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--config", type=Path, help="take the environment from this config instead of the checkpoint")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE")
    p.add_argument("--target")
    p.add_argument("--episodes", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    p.add_argument("--trace-dir", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train every reward mode on the task ladder over several seeds")
    _common_config_args(p)
    p.add_argument("--seeds", help="comma-separated seeds (default: [ablate].seeds)")
    p.add_argument("--tasks", help="comma-separated target items (default: [ablate].tasks)")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze", help="advantage vanishment profiles")
    p.add_argument("--config", type=Path, help="environment and policy settings for --empirical")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("analysis"), help="output directory")
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--lam", type=float, default=0.95)
    p.add_argument("--reward", type=float, default=1.0)
    p.add_argument("--max-offset", type=int, default=200)
    p.add_argument("--empirical", metavar="TARGET", help="also measure profiles with a fitted critic on TARGET")
    p.add_argument("--episodes", type=int, default=256)
    p.add_argument("--critic-epochs", type=int, default=200)
    p.add_argument("--min-count", type=int, default=20)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("init", help="write a random-weights checkpoint for a config")
    _common_config_args(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_init)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, OSError, RuntimeError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
