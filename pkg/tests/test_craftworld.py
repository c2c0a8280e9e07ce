import dataclasses
import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import mini_config
from oracles import bfs_distance, bfs_plan
from refereerl.craftworld import (
    CraftWorld,
    SkillSpec,
    TaskTarget,
    WorldState,
    default_env_config,
    env_config_from_dict,
    load_env_config,
    write_trace_csv,
)
from refereerl.errors import ConfigError, UsageError

LADDER = ["stick", "wooden_pickaxe", "stone_pickaxe", "iron_pickaxe", "enchanted_sword"]


def test_default_book_shape(world):
    assert len(world.skills) == 14
    assert world.planner.analytic
    assert world.obs_dim == len(world.tasks) + len(world.items) + len(world.resources) + len(world.skills)


def test_reset_is_deterministic(world, stick):
    assert world.reset(stick, 7) == world.reset(stick, 7)


def test_reset_degenerate_spawn():
    w = CraftWorld(mini_config(spawn={"tree": (3, 3), "stone": (5, 5)}))
    for seed in range(5):
        s = w.reset(TaskTarget("stick"), seed)
        assert s.nearby == {"tree": 3, "stone": 5}
        assert s.inventory == {} and s.steps_elapsed == 0 and not s.done


def test_reset_within_spawn_ranges(world):
    spawn = world.config.spawn
    for seed in range(50):
        s = world.reset(TaskTarget("enchanted_sword"), seed)
        for name, (lo, hi) in spawn.items():
            assert lo <= s.nearby.get(name, 0) <= hi


def test_reset_unknown_target(world):
    with pytest.raises(ConfigError):
        world.reset(TaskTarget("netherite_hoe"), 0)


def test_step_craft_stick(world, stick):
    s = WorldState({"planks": 2}, {})
    nxt, r, done = world.step(s, "craft_stick", TaskTarget("wooden_pickaxe"), np.random.default_rng(0))
    assert nxt.inventory == {"stick": 4}
    assert r == pytest.approx(-0.01)
    assert not done and nxt.steps_elapsed == 1


def test_step_missing_preconditions_is_noop(world, stick):
    s = WorldState({}, {"tree": 3})
    nxt, r, done = world.step(s, "craft_stick", stick, np.random.default_rng(0))
    assert nxt.inventory == {} and nxt.nearby == {"tree": 3}
    assert nxt.steps_elapsed == 1
    assert r == pytest.approx(-0.01) and not done


def test_step_terminal_reward(world, stick):
    s = WorldState({"planks": 2}, {})
    nxt, r, done = world.step(s, "craft_stick", stick, np.random.default_rng(0))
    assert r == pytest.approx(0.99, abs=1e-12)
    assert done and nxt.done


def test_step_errors(world, stick):
    rng = np.random.default_rng(0)
    with pytest.raises(UsageError):
        world.step(WorldState({}, {}, 3, True), "gather_log", stick, rng)
    with pytest.raises(ConfigError):
        world.step(WorldState({}, {}), "dig_to_china", stick, rng)


def test_horizon_ends_episode():
    w = CraftWorld(mini_config(horizon=12))
    s = w.reset(TaskTarget("stick"), 0)
    rng = np.random.default_rng(0)
    for _ in range(12):
        s, r, done = w.step(s, "craft_stick", TaskTarget("stick"), rng)
    assert done and s.steps_elapsed == 12


def test_stochastic_failure_rate(world):
    rng = np.random.default_rng(3)
    s = WorldState({}, {"tree": 1})
    wins = sum(bool(world.step(s, "gather_log", TaskTarget("stick"), rng)[0].inventory) for _ in range(4000))
    assert abs(wins / 4000 - 0.9) < 3 * np.sqrt(0.09 / 4000)


def test_observe_pure_and_indexed(world, stick):
    s = WorldState({"log": 2}, {"tree": 4})
    a = world.observe(s, stick, "gather_log")
    b = world.observe(s, stick, "gather_log")
    assert np.array_equal(a.vector, b.vector)
    expect = np.zeros(len(world.items))
    expect[world.items.index("log")] = 2
    assert np.array_equal(a.inventory_vec, expect)
    assert a.target_onehot.sum() == 1 and a.target_onehot[world.tasks.index("stick")] == 1
    assert a.last_action_onehot[world.skills.index("gather_log")] == 1
    assert len(a.vector) == world.obs_dim


def test_observe_empty_inventory(world, stick):
    assert not world.observe(WorldState({}, {"tree": 1}), stick).inventory_vec.any()


def test_plan_already_satisfied(world, stick):
    assert world.shortest_plan(WorldState({"stick": 1}, {}), stick) == []


def test_plan_unreachable(world, stick):
    assert world.shortest_plan(WorldState({}, {"stone": 9}), stick) is None


def test_plan_wooden_pickaxe_matches_bfs(world):
    s = WorldState({}, {"tree": 4, "stone": 12})
    plan = world.shortest_plan(s, TaskTarget("wooden_pickaxe"))
    assert plan == bfs_plan(world.config.recipe_book, s.pool(), "wooden_pickaxe")
    assert len(plan) == 9


@pytest.mark.parametrize("item", LADDER)
def test_executing_plan_reaches_target(world, item):
    certain = dataclasses.replace(
        world.config,
        recipe_book=tuple(dataclasses.replace(s, success_prob=1.0) for s in world.config.recipe_book),
    )
    w = CraftWorld(certain)
    tgt = TaskTarget(item)
    for seed in range(3):
        s = w.reset(tgt, seed)
        plan = w.shortest_plan(s, tgt)
        rng = np.random.default_rng(seed)
        for k, skill in enumerate(plan):
            assert not s.done
            s, r, done = w.step(s, skill, tgt, rng)
        assert done and tgt.satisfied(s.inventory)


pools = st.fixed_dictionaries(
    {
        "log": st.integers(0, 2),
        "planks": st.integers(0, 6),
        "stick": st.integers(0, 3),
        "crafting_table": st.integers(0, 1),
        "wooden_pickaxe": st.integers(0, 1),
        "cobblestone": st.integers(0, 4),
        "tree": st.integers(0, 4),
        "stone": st.integers(0, 5),
    }
)


@settings(max_examples=60, deadline=None)
@given(pool=pools, item=st.sampled_from(["stick", "crafting_table", "wooden_pickaxe", "stone_pickaxe"]))
def test_planner_distance_matches_bfs(world, pool, item):
    assert world.planner.distance(pool, TaskTarget(item)) == bfs_distance(world.config.recipe_book, pool, item)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), actions=st.lists(st.integers(0, 13), min_size=1, max_size=60))
def test_reward_trace_and_conservation(world, seed, actions):
    tgt = TaskTarget("wooden_pickaxe")
    rng = np.random.default_rng(seed)
    s = world.reset(tgt, seed)
    eps, R = world.config.step_penalty, world.config.terminal_reward
    by_id = world.planner.by_id
    for a in actions:
        if s.done:
            break
        skill = world.skills[a]
        nxt, r, done = world.step(s, skill, tgt, rng)
        before, after = s.pool(), nxt.pool()
        spec = by_id[skill]
        changed = before != after
        if changed:
            for k in set(before) | set(after):
                expect = before.get(k, 0) - spec.consumes.get(k, 0) + spec.yields.get(k, 0)
                assert after.get(k, 0) == expect
        if tgt.satisfied(nxt.inventory):
            assert r == pytest.approx(R - eps, abs=1e-12) and done
        else:
            assert r == pytest.approx(-eps, abs=1e-12)
        assert all(v >= 0 for v in after.values())
        s = nxt


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), actions=st.lists(st.integers(0, 13), min_size=1, max_size=40))
def test_seeded_transitions_identical(world, seed, actions):
    def trace():
        tgt = TaskTarget("stone_pickaxe")
        rng = np.random.default_rng(seed)
        s = world.reset(tgt, seed)
        out = []
        for a in actions:
            if s.done:
                break
            s, r, d = world.step(s, world.skills[a], tgt, rng)
            out.append((s, r, d))
        return out

    assert trace() == trace()


def test_default_config_roundtrip(tmp_path):
    import tomli_w

    cfg = default_env_config()
    path = tmp_path / "book.toml"
    path.write_bytes(tomli_w.dumps(cfg.to_dict()).encode())
    assert load_env_config(path) == cfg


def test_config_errors(tmp_path):
    doc = default_env_config().to_dict()
    with pytest.raises(ConfigError, match="schema_version"):
        env_config_from_dict({**doc, "schema_version": 99})
    with pytest.raises(ConfigError, match="not found"):
        load_env_config(tmp_path / "missing.toml")
    short = CraftWorld(env_config_from_dict({**doc, "horizon": 20}))
    short.reset(TaskTarget("stone_pickaxe"), 0)
    with pytest.raises(ConfigError, match="horizon"):
        short.reset(TaskTarget("iron_pickaxe"), 0)
    with pytest.raises(ConfigError):
        CraftWorld(env_config_from_dict({**doc, "step_penalty": 2.0}))
    bad = mini_config(recipe_book=(SkillSpec("x", {"a": 1}, {"a": 2}, {"b": 1}),))
    with pytest.raises(ConfigError, match="consumes"):
        CraftWorld(bad)
    loop = mini_config(
        recipe_book=(SkillSpec("x", {"a": 1}, {"a": 1}, {"b": 1}), SkillSpec("y", {"b": 1}, {"b": 1}, {"a": 1}))
    )
    with pytest.raises(ConfigError, match="cycle"):
        CraftWorld(loop)
    with pytest.raises(ConfigError, match="yields"):
        CraftWorld(mini_config(recipe_book=(SkillSpec("x", {}, {}, {}),)))


def test_trace_csv(tmp_path, world, stick):
    s0 = WorldState({"planks": 2}, {})
    s1, r, _ = world.step(s0, "craft_stick", stick, np.random.default_rng(0))
    path = tmp_path / "trace.csv"
    write_trace_csv(path, [(1, "craft_stick", r, s0, s1)])
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["step", "skill", "reward", "inventory_diff"]
    assert rows[1] == ["1", "craft_stick", "0.99", "planks:-2;stick:+4"]
