from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from ..craftworld import TaskTarget, WorldState
from ..errors import ConfigError

CATEGORIES = ("A", "B", "C", "D")


@dataclass(frozen=True)
class RewardScalars:
    a: float = 0.5
    b: float = 0.1
    c: float = -0.1
    d: float = -0.5

    def __post_init__(self):
        if not self.a > self.b > 0 > self.c > self.d:
            raise ConfigError(
                f"referee rewards must satisfy r_a > r_b > 0 > r_c > r_d, got "
                f"{self.a}, {self.b}, {self.c}, {self.d}"
            )

    def of(self, category: str) -> float:
        return {"A": self.a, "B": self.b, "C": self.c, "D": self.d}[category]


@dataclass(frozen=True)
class RefereeVerdict:
    category: str
    reward: float
    fallback: bool = False
    note: str = ""


@dataclass(frozen=True)
class RefereeQuery:
    target: TaskTarget
    state_before: WorldState
    action: str
    state_after: WorldState

    def cache_key(self) -> tuple:
        return (self.target, self.state_before.key(), self.action, self.state_after.key())


class Referee:
    """Common surface: ``judge`` one transition, ``judge_many`` a batch in order."""

    name = "referee"

    def __init__(self, scalars: RewardScalars | None = None):
        self.scalars = scalars or RewardScalars()
        self.query_count = 0

    def verdict(self, category: str, **kw) -> RefereeVerdict:
        return RefereeVerdict(category, self.scalars.of(category), **kw)

    def judge(self, query: RefereeQuery) -> RefereeVerdict:
        raise NotImplementedError

    def judge_many(self, queries: Sequence[RefereeQuery]) -> list[RefereeVerdict]:
        return [self.judge(q) for q in queries]
