"""Plan-oracle referees: exact four-way judging, the outcome-only variant, and a noisy one."""

from __future__ import annotations

import numpy as np

from ..craftworld import CraftWorld
from ..errors import ConfigError
from .base import CATEGORIES, Referee, RefereeQuery, RefereeVerdict, RewardScalars


class OracleReferee(Referee):
    """Judges with the environment's planner.

    An action is correct when it starts some minimal plan from the state it was
    taken in. The outcome is positive when the remaining plan length shrank,
    and negative when a count the plan relies on went down without progress.
    """

    name = "oracle"

    def __init__(self, world: CraftWorld, scalars: RewardScalars | None = None, cache: bool = True):
        super().__init__(scalars)
        self.world = world
        self.planner = world.planner
        self._cache: dict | None = {} if cache else None

    def classify(self, query: RefereeQuery) -> tuple[bool, bool, bool]:
        """(correct, positive, negative) flags for a transition."""
        before, after = query.state_before.pool(), query.state_after.pool()
        d0 = self.planner.distance(before, query.target)
        if d0 is None:
            return False, False, False
        d1 = self.planner.distance(after, query.target)
        positive = d1 is not None and d1 < d0
        correct = query.action in self.planner.correct_skills(before, query.target)
        needed = self.planner.needed_items(before, query.target)
        lost = any(after.get(k, 0) < before.get(k, 0) for k in needed)
        return correct, positive, lost and not positive

    def categorize(self, query: RefereeQuery) -> str:
        correct, positive, negative = self.classify(query)
        if correct:
            return "A" if positive else "B"
        return "D" if negative else "C"

    def judge(self, query: RefereeQuery) -> RefereeVerdict:
        self.query_count += 1
        if self._cache is None:
            return self.verdict(self.categorize(query))
        key = query.cache_key()
        cat = self._cache.get(key)
        if cat is None:
            cat = self._cache[key] = self.categorize(query)
        return self.verdict(cat)


class BinaryReferee(OracleReferee):
    """Outcome-only judging: A when the transition made progress, D otherwise."""

    name = "binary"

    def categorize(self, query: RefereeQuery) -> str:
        _, positive, _ = self.classify(query)
        return "A" if positive else "D"


class NoisyReferee(Referee):
    """Oracle verdicts, each replaced by a uniformly random other category with ``flip_prob``."""

    name = "noisy"

    def __init__(
        self,
        world: CraftWorld,
        flip_prob: float = 0.5,
        seed: int | np.random.Generator = 0,
        scalars: RewardScalars | None = None,
    ):
        super().__init__(scalars)
        if not 0.0 <= flip_prob <= 1.0:
            raise ConfigError("flip_prob must lie in [0, 1]")
        self.flip_prob = flip_prob
        self.oracle = OracleReferee(world, self.scalars)
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def judge(self, query: RefereeQuery) -> RefereeVerdict:
        self.query_count += 1
        cat = self.oracle.judge(query).category
        # draw both numbers every call so the stream position is independent of outcomes
        flip, pick = self.rng.random(), int(self.rng.integers(3))
        if flip < self.flip_prob:
            cat = [c for c in CATEGORIES if c != cat][pick]
        return self.verdict(cat)
