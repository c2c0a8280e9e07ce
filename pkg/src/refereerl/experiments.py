"""Run persistence and the reward-mode ablation grid shared by the CLI and the test suite."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import subprocess
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig, check_ablation
from .craftworld import CraftWorld, TaskTarget, env_config_from_dict
from .errors import ConfigError, UsageError
from .policy import ActorCritic
from .trainer import REWARD_MODES, TrainResult, evaluate_policy, train

log = logging.getLogger(__name__)

Z95 = 1.959963984540054


def wilson_interval(successes: int, n: int, z: float = Z95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n < 1:
        raise UsageError("need at least one trial")
    p = successes / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def checkpoint_meta(cfg: RunConfig, **extra) -> dict:
    """Metadata stored with a policy so that ``eval`` can rebuild its environment."""
    return {
        "env": cfg.env.to_dict(),
        "target": cfg.target.target_item,
        "target_count": cfg.target.target_count,
        "reward_mode": cfg.train.reward_mode,
        "seed": cfg.train.seed,
        **extra,
    }


def world_from_meta(meta: dict) -> CraftWorld:
    if "env" not in meta:
        raise ConfigError("checkpoint carries no environment description; pass --config")
    return CraftWorld(env_config_from_dict(meta["env"]))


@dataclass
class RunRecord:
    run_id: str
    directory: Path
    config_path: Path
    metrics_path: Path
    checkpoints: list[Path]
    git_describe: str
    eval_success_rate: float | None = None
    eval_interval: tuple[float, float] | None = None

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "config": self.config_path.name,
            "metrics": self.metrics_path.name,
            "checkpoints": [str(p.relative_to(self.directory)) for p in self.checkpoints],
            "git_describe": self.git_describe,
            "eval_success_rate": self.eval_success_rate,
            "eval_interval": list(self.eval_interval) if self.eval_interval else None,
        }


def new_run_dir(root: Path, seed: int) -> tuple[str, Path]:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    run_id = f"{stamp}-s{seed}"
    path = root / run_id
    k = 1
    while path.exists():
        k += 1
        path = root / f"{run_id}-{k}"
    path.mkdir(parents=True)
    return path.name, path


def execute_run(cfg: RunConfig, out_root: str | Path | None = None, evaluate: bool = True) -> RunRecord:
    """Train under ``cfg`` and persist the run directory: config.toml, metrics.csv,
    checkpoints/, traces/ and record.json."""
    root = Path(out_root if out_root is not None else cfg.run.output_dir)
    run_id, d = new_run_dir(root, cfg.train.seed)
    (d / "config.toml").write_text(cfg.dumps())
    world = cfg.world()
    result = train(
        world,
        cfg.target,
        cfg.train,
        policy_config=cfg.policy,
        metrics_path=d / "metrics.csv",
        checkpoint_dir=d / "checkpoints",
        referee_options=cfg.referee.options(),
    )
    final = d / "checkpoints" / "final.ckpt"
    final.parent.mkdir(exist_ok=True)
    result.policy.save(final, checkpoint_meta(cfg, iteration=cfg.train.iterations))
    record = RunRecord(run_id, d, d / "config.toml", d / "metrics.csv", [*result.checkpoints, final], git_describe())
    if evaluate:
        rep = evaluate_policy(
            world, result.policy, cfg.target, cfg.run.eval_episodes, cfg.run.eval_seed, cfg.run.eval_mode, d / "traces"
        )
        record.eval_success_rate = rep.success_rate
        record.eval_interval = wilson_interval(rep.successes, rep.episodes)
    (d / "record.json").write_text(json.dumps(record.to_json(), indent=2) + "\n")
    return record


@dataclass
class CellResult:
    task: str
    mode: str
    seed: int
    success_rate: float | None  # None marks a failed cell
    error: str = ""


@dataclass
class AblationTable:
    tasks: list[str]
    modes: list[str]
    cells: list[CellResult] = field(default_factory=list)

    def rates(self, mode: str, task: str) -> list[float]:
        return [c.success_rate for c in self.cells if c.mode == mode and c.task == task and c.success_rate is not None]

    def failed(self, mode: str, task: str) -> bool:
        return any(c.success_rate is None for c in self.cells if c.mode == mode and c.task == task)

    @property
    def any_failed(self) -> bool:
        return any(c.success_rate is None for c in self.cells)

    def mean(self, mode: str, task: str) -> float:
        r = self.rates(mode, task)
        return float(np.mean(r)) if r else float("nan")

    def sd(self, mode: str, task: str) -> float:
        r = self.rates(mode, task)
        return float(np.std(r, ddof=1)) if len(r) > 1 else 0.0

    def cell_text(self, mode: str, task: str) -> str:
        if self.failed(mode, task):
            return "FAILED"
        return f"{self.mean(mode, task):.2f} ± {self.sd(mode, task):.2f}"

    def markdown(self) -> str:
        lines = ["| reward | " + " | ".join(self.tasks) + " |", "|---" * (len(self.tasks) + 1) + "|"]
        for m in self.modes:
            lines.append(f"| {m} | " + " | ".join(self.cell_text(m, t) for t in self.tasks) + " |")
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str | Path) -> None:
        """Summary table: one row per mode, ``mean ± sd`` per task column."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["reward", *self.tasks])
            for m in self.modes:
                w.writerow([m, *(self.cell_text(m, t) for t in self.tasks)])

    def write_cells_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task", "reward_mode", "seed", "success_rate", "error"])
            for c in self.cells:
                w.writerow([c.task, c.mode, c.seed, "" if c.success_rate is None else repr(c.success_rate), c.error])


def cell_config(cfg: RunConfig, task: str, mode: str, seed: int) -> RunConfig:
    """The run configuration of one (task, mode, seed) grid cell."""
    env = cfg.env
    if task in cfg.ablate.horizon:
        env = dataclasses.replace(env, horizon=int(cfg.ablate.horizon[task]))
    iterations = int(cfg.ablate.iterations.get(task, cfg.train.iterations))
    tr = dataclasses.replace(cfg.train, reward_mode=mode, seed=seed, iterations=iterations, checkpoint_every=0)
    return dataclasses.replace(cfg, env=env, target=TaskTarget(task), train=tr)


def run_cell(cfg: RunConfig, out_dir: Path | None = None) -> tuple[ActorCritic, float]:
    """Train one cell, save its checkpoint and return (policy, evaluation success rate)."""
    world = cfg.world()
    metrics = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.toml").write_text(cfg.dumps())
        metrics = out_dir / "metrics.csv"
    res: TrainResult = train(
        world, cfg.target, cfg.train, policy_config=cfg.policy, metrics_path=metrics, referee_options=cfg.referee.options()
    )
    if out_dir is not None:
        res.policy.save(out_dir / "final.ckpt", checkpoint_meta(cfg))
    rep = evaluate_policy(world, res.policy, cfg.target, cfg.run.eval_episodes, cfg.run.eval_seed + cfg.train.seed, cfg.run.eval_mode)
    return res.policy, rep.success_rate


def run_ablation(
    cfg: RunConfig,
    seeds: Sequence[int] | None = None,
    out_dir: str | Path | None = None,
    progress: Callable[[CellResult], None] | None = None,
) -> AblationTable:
    seeds = list(cfg.ablate.seeds if seeds is None else seeds)
    if len(seeds) < 2:
        raise UsageError("ablation needs at least two seeds")
    check_ablation(cfg)
    modes = [m for m in REWARD_MODES if m in cfg.ablate.modes]
    table = AblationTable(list(cfg.ablate.tasks), modes)
    root = Path(out_dir) if out_dir is not None else None
    for task in table.tasks:
        for mode in modes:
            for seed in seeds:
                cell = cell_config(cfg, task, mode, seed)
                where = root / "cells" / task / mode / f"s{seed}" if root is not None else None
                try:
                    _, rate = run_cell(cell, where)
                    result = CellResult(task, mode, seed, rate)
                except Exception as exc:  # a broken cell is reported, the grid continues
                    log.exception("cell %s/%s/s%d failed", task, mode, seed)
                    result = CellResult(task, mode, seed, None, f"{type(exc).__name__}: {exc}")
                table.cells.append(result)
                if progress:
                    progress(result)
    return table
