import dataclasses
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from refereerl.craftworld import CraftWorld, EnvConfig, SkillSpec, TaskTarget, default_env_config  # noqa: E402


def mini_book() -> tuple[SkillSpec, ...]:
    """Five-item ladder: log -> planks -> stick / crafting_table -> wooden_pickaxe."""
    return (
        SkillSpec("gather_log", {"tree": 1}, {"tree": 1}, {"log": 1}, 0.9),
        SkillSpec("craft_planks", {"log": 1}, {"log": 1}, {"planks": 4}),
        SkillSpec("craft_stick", {"planks": 2}, {"planks": 2}, {"stick": 4}),
        SkillSpec("craft_crafting_table", {"planks": 4}, {"planks": 4}, {"crafting_table": 1}),
        SkillSpec(
            "craft_wooden_pickaxe",
            {"planks": 3, "stick": 2, "crafting_table": 1},
            {"planks": 3, "stick": 2},
            {"wooden_pickaxe": 1},
        ),
    )


def mini_config(**kw) -> EnvConfig:
    base = EnvConfig(recipe_book=mini_book(), spawn={"tree": (3, 3)}, horizon=50)
    return dataclasses.replace(base, **kw)


def bandit_config(n_skills: int = 8, rewarded: str = "press_3") -> EnvConfig:
    """One-step world: a single skill yields the target, the others yield junk."""
    book = tuple(
        SkillSpec(f"press_{i}", {}, {}, {"prize" if f"press_{i}" == rewarded else f"junk_{i}": 1})
        for i in range(n_skills)
    )
    return EnvConfig(recipe_book=book, spawn={}, horizon=1, tasks=("prize",))


@pytest.fixture(scope="session")
def world() -> CraftWorld:
    return CraftWorld(default_env_config())


@pytest.fixture(scope="session")
def mini_world() -> CraftWorld:
    return CraftWorld(mini_config())


@pytest.fixture
def stick() -> TaskTarget:
    return TaskTarget("stick")
