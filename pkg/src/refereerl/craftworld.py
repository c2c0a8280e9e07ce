"""Crafting environment with a tech-tree of stochastic skills and a sparse terminal reward.

The world is a bag of counts: the agent's inventory plus the resources lying
around it. Each skill checks its preconditions, and on success removes what it
consumes and adds what it yields. Every step costs ``step_penalty``; the step
that first satisfies the target additionally pays ``terminal_reward``.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import tomli

from .errors import ConfigError, UsageError

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class SkillSpec:
    id: str
    requires: Mapping[str, int]
    consumes: Mapping[str, int]
    yields: Mapping[str, int]
    success_prob: float = 1.0

    def validate(self) -> None:
        if not self.yields:
            raise ConfigError(f"skill {self.id!r}: yields must be non-empty")
        if not 0.0 < self.success_prob <= 1.0:
            raise ConfigError(f"skill {self.id!r}: success_prob must lie in (0, 1]")
        for name, n in {**self.requires, **self.consumes, **self.yields}.items():
            if not isinstance(n, int) or n <= 0:
                raise ConfigError(f"skill {self.id!r}: count for {name!r} must be a positive integer")
        for name, n in self.consumes.items():
            if self.requires.get(name, 0) < n:
                raise ConfigError(f"skill {self.id!r}: consumes {name!r} beyond what it requires")


@dataclass(frozen=True)
class TaskTarget:
    target_item: str
    target_count: int = 1

    def __post_init__(self):
        if self.target_count < 1:
            raise ConfigError("target_count must be >= 1")

    def satisfied(self, inventory: Mapping[str, int]) -> bool:
        return inventory.get(self.target_item, 0) >= self.target_count


@dataclass(frozen=True)
class WorldState:
    inventory: Mapping[str, int]
    nearby: Mapping[str, int]
    steps_elapsed: int = 0
    done: bool = False

    def key(self) -> tuple:
        return (tuple(sorted(self.inventory.items())), tuple(sorted(self.nearby.items())))

    def pool(self) -> dict[str, int]:
        """Inventory and nearby counts merged into one map (names are disjoint)."""
        merged = dict(self.nearby)
        merged.update(self.inventory)
        return merged


@dataclass(frozen=True)
class Observation:
    target_onehot: np.ndarray
    inventory_vec: np.ndarray
    nearby_vec: np.ndarray
    last_action_onehot: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate(
            [self.target_onehot, self.inventory_vec, self.nearby_vec, self.last_action_onehot]
        )


@dataclass(frozen=True)
class EnvConfig:
    recipe_book: tuple[SkillSpec, ...]
    spawn: Mapping[str, tuple[int, int]]
    horizon: int = 200
    step_penalty: float = 0.01
    terminal_reward: float = 1.0
    seed: int = 0
    tasks: tuple[str, ...] = ()
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        out = {
            "schema_version": self.schema_version,
            "horizon": self.horizon,
            "step_penalty": self.step_penalty,
            "terminal_reward": self.terminal_reward,
            "seed": self.seed,
            "spawn": {k: [int(lo), int(hi)] for k, (lo, hi) in self.spawn.items()},
            "skill": [
                {
                    "id": s.id,
                    "requires": dict(s.requires),
                    "consumes": dict(s.consumes),
                    "yields": dict(s.yields),
                    "success_prob": float(s.success_prob),
                }
                for s in self.recipe_book
            ],
        }
        if self.tasks:
            out["tasks"] = list(self.tasks)
        return out


def env_config_from_dict(doc: Mapping) -> EnvConfig:
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported recipe schema_version {version!r} (expected {SCHEMA_VERSION})")
    try:
        book = tuple(
            SkillSpec(
                id=str(s["id"]),
                requires=dict(s.get("requires", {})),
                consumes=dict(s.get("consumes", {})),
                yields=dict(s["yields"]),
                success_prob=float(s.get("success_prob", 1.0)),
            )
            for s in doc["skill"]
        )
    except KeyError as exc:
        raise ConfigError(f"recipe book entry missing field {exc}") from None
    spawn = {}
    for name, rng in doc.get("spawn", {}).items():
        if isinstance(rng, int):
            rng = [rng, rng]
        lo, hi = (int(v) for v in rng)
        if lo < 0 or hi < lo:
            raise ConfigError(f"spawn range for {name!r} must satisfy 0 <= lo <= hi")
        spawn[name] = (lo, hi)
    return EnvConfig(
        recipe_book=book,
        spawn=spawn,
        horizon=int(doc.get("horizon", 200)),
        step_penalty=float(doc.get("step_penalty", 0.01)),
        terminal_reward=float(doc.get("terminal_reward", 1.0)),
        seed=int(doc.get("seed", 0)),
        tasks=tuple(doc.get("tasks", ())),
        schema_version=version,
    )


def load_env_config(path: str | Path) -> EnvConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"recipe file not found: {path}")
    with path.open("rb") as fh:
        try:
            doc = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return env_config_from_dict(doc)


def default_env_config() -> EnvConfig:
    text = resources.files("refereerl.data").joinpath("default_recipes.toml").read_text()
    return env_config_from_dict(tomli.loads(text))


def _meets(pool: Mapping[str, int], req: Mapping[str, int]) -> bool:
    return all(pool.get(k, 0) >= n for k, n in req.items())


class Planner:
    """Minimal-length plans over a recipe book, with skill success treated as certain.

    For books where every item has a single producing skill and each item is
    either always consumed in full or never consumed (a tool), the plan length
    is computed exactly by propagating demand down the skill DAG. Other books
    fall back to breadth-first search.
    """

    def __init__(self, book: Sequence[SkillSpec], max_bfs_states: int = 200_000):
        self.book = tuple(sorted(book, key=lambda s: s.id))
        self.by_id = {s.id: s for s in self.book}
        self.max_bfs_states = max_bfs_states
        self.producer: dict[str, SkillSpec] = {}
        self.analytic = True
        for s in self.book:
            for item in s.yields:
                if item in self.producer:
                    self.analytic = False
                self.producer[item] = s
        consumed = {i for s in self.book for i in s.consumes}
        for s in self.book:
            for item, n in s.requires.items():
                if item in consumed and s.consumes.get(item, 0) != n:
                    self.analytic = False
        self.order = self._topological()
        self._distance = lru_cache(maxsize=1 << 18)(self._distance_uncached)

    def _topological(self) -> list[SkillSpec]:
        deps = {
            s.id: {self.producer[i].id for i in s.requires if i in self.producer and self.producer[i].id != s.id}
            for s in self.book
        }
        for s in self.book:
            if any(i in s.yields for i in s.requires):
                raise ConfigError(f"skill {s.id!r} requires an item it yields")
        order, done, visiting = [], set(), set()

        def visit(sid):
            if sid in done:
                return
            if sid in visiting:
                raise ConfigError(f"recipe book has a cycle through {sid!r}")
            visiting.add(sid)
            for d in sorted(deps[sid]):
                visit(d)
            visiting.discard(sid)
            done.add(sid)
            order.append(self.by_id[sid])

        for s in self.book:
            visit(s.id)
        return order

    # pool is a sorted tuple of (name, count) with zero counts dropped
    def distance(self, pool: Mapping[str, int], target: TaskTarget) -> int | None:
        key = tuple(sorted((k, v) for k, v in pool.items() if v))
        return self._distance(key, target)

    def _distance_uncached(self, key: tuple, target: TaskTarget) -> int | None:
        pool = dict(key)
        if target.satisfied(pool):
            return 0
        if self.analytic:
            counts = self._demand(pool, target)
            return None if counts is None else sum(counts.values())
        return self._bfs(pool, target)

    def _demand(self, pool: Mapping[str, int], target: TaskTarget) -> dict[str, int] | None:
        """Execution count of every skill in a minimal plan, or None if unreachable."""
        need: dict[str, int] = {target.target_item: target.target_count}
        runs: dict[str, int] = {}
        for s in reversed(self.order):
            n = 0
            for item, y in s.yields.items():
                deficit = need.get(item, 0) - pool.get(item, 0)
                if deficit > 0:
                    n = max(n, -(-deficit // y))
            if n == 0:
                continue
            runs[s.id] = n
            for item, r in s.requires.items():
                c = s.consumes.get(item, 0)
                if c:
                    need[item] = need.get(item, 0) + n * c
                else:
                    need[item] = max(need.get(item, 0), r)
        for item, n in need.items():
            if item not in self.producer and pool.get(item, 0) < n:
                return None
        return runs

    def _bfs(self, pool: Mapping[str, int], target: TaskTarget) -> int | None:
        start = tuple(sorted(pool.items()))
        seen = {start}
        frontier = deque([(start, 0)])
        while frontier:
            key, depth = frontier.popleft()
            cur = dict(key)
            for s in self.book:
                if not _meets(cur, s.requires):
                    continue
                nxt = apply_skill(cur, s)
                if target.satisfied(nxt):
                    return depth + 1
                k = tuple(sorted((a, b) for a, b in nxt.items() if b))
                if k not in seen:
                    if len(seen) >= self.max_bfs_states:
                        raise UsageError("plan search exceeded its state budget")
                    seen.add(k)
                    frontier.append((k, depth + 1))
        return None

    def correct_skills(self, pool: Mapping[str, int], target: TaskTarget) -> list[str]:
        """Skills that begin some minimal plan from ``pool``, in id order."""
        d = self.distance(pool, target)
        if not d:
            return []
        return [
            s.id
            for s in self.book
            if _meets(pool, s.requires) and self.distance(apply_skill(pool, s), target) == d - 1
        ]

    def plan(self, pool: Mapping[str, int], target: TaskTarget) -> list[str] | None:
        d = self.distance(pool, target)
        if d is None:
            return None
        out = []
        cur = dict(pool)
        while d > 0:
            sid = self.correct_skills(cur, target)[0]
            cur = apply_skill(cur, self.by_id[sid])
            out.append(sid)
            d -= 1
        return out

    def needed_items(self, pool: Mapping[str, int], target: TaskTarget) -> set[str]:
        """Names whose counts a minimal plan from ``pool`` relies on."""
        if self.analytic:
            runs = self._demand(pool, target) if not target.satisfied(pool) else {}
            plan = runs
        else:
            plan = self.plan(pool, target)
        if plan is None:
            return set()
        needed = {target.target_item}
        for sid in plan:
            needed.update(self.by_id[sid].requires)
        return needed


def apply_skill(pool: Mapping[str, int], skill: SkillSpec) -> dict[str, int]:
    """Successful execution of ``skill`` on a merged count map (preconditions assumed met)."""
    out = dict(pool)
    for k, n in skill.consumes.items():
        out[k] = out[k] - n
    for k, n in skill.yields.items():
        out[k] = out.get(k, 0) + n
    return {k: v for k, v in out.items() if v}


class CraftWorld:
    """Compiled environment: index maps, planner and the step/observe machinery."""

    def __init__(self, config: EnvConfig):
        self.config = config
        if config.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {config.schema_version}")
        if not config.recipe_book:
            raise ConfigError("recipe book is empty")
        if not 0 <= config.step_penalty < config.terminal_reward:
            raise ConfigError("need 0 <= step_penalty < terminal_reward")
        if config.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        ids = [s.id for s in config.recipe_book]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate skill ids in recipe book")
        for s in config.recipe_book:
            s.validate()
        self.skills = sorted(ids)
        self.skill_index = {sid: i for i, sid in enumerate(self.skills)}
        self.resources = list(config.spawn)
        items: list[str] = []
        for s in config.recipe_book:
            for name in [*s.requires, *s.yields]:
                if name not in config.spawn and name not in items:
                    items.append(name)
        self.items = items
        self.item_index = {name: i for i, name in enumerate(items)}
        self.resource_index = {name: i for i, name in enumerate(self.resources)}
        for s in config.recipe_book:
            for name in s.yields:
                if name in config.spawn:
                    raise ConfigError(f"skill {s.id!r} yields nearby resource {name!r}")
        self.planner = Planner(config.recipe_book)
        producible = [i for i in items if i in self.planner.producer]
        self.tasks = list(config.tasks) if config.tasks else producible
        for t in self.tasks:
            if t not in self.planner.producer:
                raise ConfigError(f"task item {t!r} is not producible by the recipe book")
        self.task_index = {name: i for i, name in enumerate(self.tasks)}
        self.obs_dim = len(self.tasks) + len(self.items) + len(self.resources) + len(self.skills)
        self._lean = WorldState({}, {k: lo for k, (lo, _) in config.spawn.items()}).pool()
        self._checked: set[TaskTarget] = set()

    def check_target(self, target: TaskTarget) -> None:
        """Reject targets the recipe book cannot produce or the horizon cannot fit."""
        if target in self._checked:
            return
        if target.target_item not in self.planner.producer:
            raise ConfigError(f"unknown or unproducible target item {target.target_item!r}")
        plan_len = self.planner.distance(self._lean, target)
        if plan_len is not None and plan_len > self.config.horizon:
            raise ConfigError(
                f"horizon {self.config.horizon} shorter than the {plan_len}-step plan for {target.target_item!r}"
            )
        self._checked.add(target)

    def reset(self, target: TaskTarget, seed: int | np.random.Generator) -> WorldState:
        self.check_target(target)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        nearby = {}
        for name, (lo, hi) in self.config.spawn.items():
            n = int(rng.integers(lo, hi + 1))
            if n:
                nearby[name] = n
        return WorldState(inventory={}, nearby=nearby, steps_elapsed=0, done=False)

    def step(
        self, state: WorldState, skill: str, target: TaskTarget, rng: np.random.Generator
    ) -> tuple[WorldState, float, bool]:
        if state.done:
            raise UsageError("cannot step a finished episode")
        spec = self.planner.by_id.get(skill)
        if spec is None:
            raise ConfigError(f"unknown skill id {skill!r}")
        inventory, nearby = state.inventory, state.nearby
        pool = state.pool()
        # the success draw happens only for legal actions so that illegal
        # no-ops do not advance the random stream differently per skill
        if _meets(pool, spec.requires) and (spec.success_prob >= 1.0 or rng.random() < spec.success_prob):
            inventory, nearby = dict(inventory), dict(nearby)
            for k, n in spec.consumes.items():
                bag = nearby if k in self.resource_index else inventory
                bag[k] -= n
                if not bag[k]:
                    del bag[k]
            for k, n in spec.yields.items():
                inventory[k] = inventory.get(k, 0) + n
        steps = state.steps_elapsed + 1
        reward = -self.config.step_penalty
        success = target.satisfied(inventory)
        if success and not target.satisfied(state.inventory):
            reward += self.config.terminal_reward
        done = success or steps >= self.config.horizon
        return WorldState(inventory, nearby, steps, done), reward, done

    def observe(self, state: WorldState, target: TaskTarget, last_action: str | None = None) -> Observation:
        tgt = np.zeros(len(self.tasks))
        if target.target_item in self.task_index:
            tgt[self.task_index[target.target_item]] = 1.0
        inv = np.zeros(len(self.items))
        for k, n in state.inventory.items():
            inv[self.item_index[k]] = n
        near = np.zeros(len(self.resources))
        for k, n in state.nearby.items():
            near[self.resource_index[k]] = n
        last = np.zeros(len(self.skills))
        if last_action is not None:
            last[self.skill_index[last_action]] = 1.0
        return Observation(tgt, inv, near, last)

    def observe_vector(self, state: WorldState, target: TaskTarget, last_action: str | None = None) -> np.ndarray:
        return self.observe(state, target, last_action).vector

    def shortest_plan(self, state: WorldState, target: TaskTarget) -> list[str] | None:
        return self.planner.plan(state.pool(), target)


def inventory_diff(before: Mapping[str, int], after: Mapping[str, int]) -> str:
    parts = []
    for k in sorted(set(before) | set(after)):
        d = after.get(k, 0) - before.get(k, 0)
        if d:
            parts.append(f"{k}:{d:+d}")
    return ";".join(parts)


TRACE_COLUMNS = ("step", "skill", "reward", "inventory_diff")


def write_trace_csv(path: str | Path, rows: Iterable[tuple[int, str, float, WorldState, WorldState]]) -> None:
    """Write ``(step, skill, reward, before, after)`` records as an episode trace."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for step, skill, reward, before, after in rows:
            w.writerow([step, skill, repr(float(reward)), inventory_diff(before.inventory, after.inventory)])

