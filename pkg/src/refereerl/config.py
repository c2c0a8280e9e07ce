"""Run configuration: one TOML document with [env], [train], [policy], [referee], [run]
and [ablate] sections, plus dotted-path overrides from the command line.

Every problem found while resolving a document is collected and reported at
once, each prefixed with the dotted path of the offending field.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import tomli
import tomli_w

from .craftworld import CraftWorld, EnvConfig, TaskTarget, default_env_config, env_config_from_dict, load_env_config
from .errors import ConfigError
from .policy import PolicyConfig
from .referee import EndpointConfig, RewardScalars
from .trainer import REWARD_MODES, TrainConfig

SECTIONS = ("env", "train", "policy", "referee", "run", "ablate")
ENV_SCALARS = ("horizon", "step_penalty", "terminal_reward", "seed")


@dataclass
class RefereeSettings:
    backend: str = "oracle"  # or "llm"
    flip_prob: float = 0.5
    rewards: RewardScalars = field(default_factory=RewardScalars)
    url: str = ""
    model: str = "gpt-4"
    api_key_env: str = "REFEREE_API_KEY"
    timeout: float = 30.0
    max_attempts: int = 3
    backoff: float = 1.0
    max_concurrency: int = 4
    prompt_version: str = "referee_v1"

    def endpoint(self) -> EndpointConfig | None:
        if self.backend != "llm":
            return None
        return EndpointConfig(
            url=self.url,
            model=self.model,
            api_key_env=self.api_key_env,
            timeout=self.timeout,
            max_attempts=self.max_attempts,
            backoff=self.backoff,
            max_concurrency=self.max_concurrency,
            prompt_version=self.prompt_version,
        )

    def options(self) -> dict:
        """Keyword arguments for ``trainer.make_referee``."""
        return {
            "scalars": self.rewards,
            "backend": self.backend,
            "flip_prob": self.flip_prob,
            "endpoint": self.endpoint(),
        }


@dataclass
class RunSettings:
    output_dir: str = "runs"
    eval_episodes: int = 30
    eval_mode: str = "greedy"
    eval_seed: int = 12345


@dataclass
class AblateSettings:
    tasks: list[str] = field(default_factory=lambda: ["stick", "wooden_pickaxe", "stone_pickaxe", "iron_pickaxe"])
    modes: list[str] = field(default_factory=lambda: list(REWARD_MODES))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    # per-task overrides, keyed by target item
    horizon: dict[str, int] = field(default_factory=dict)
    iterations: dict[str, int] = field(default_factory=dict)


@dataclass
class RunConfig:
    env: EnvConfig
    target: TaskTarget
    train: TrainConfig
    policy: PolicyConfig
    referee: RefereeSettings
    run: RunSettings
    ablate: AblateSettings

    def world(self) -> CraftWorld:
        return CraftWorld(self.env)

    def to_dict(self) -> dict:
        """Self-contained document: the recipe book is written inline."""
        ref = dataclasses.asdict(self.referee)
        return {
            "env": {
                "target": self.target.target_item,
                "target_count": self.target.target_count,
                "book": self.env.to_dict(),
            },
            "train": dataclasses.asdict(self.train),
            "policy": {**dataclasses.asdict(self.policy), "hidden": list(self.policy.hidden)},
            "referee": ref,
            "run": dataclasses.asdict(self.run),
            "ablate": dataclasses.asdict(self.ablate),
        }

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())


def _coerce(value: Any, default: Any, path: str, errors: list[str]):
    """Check ``value`` against the type of ``default``; ints are accepted for floats."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok:
            value = float(value)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, list)
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
    else:
        ok = True
    if not ok:
        want = "list" if isinstance(default, tuple) else type(default).__name__
        errors.append(f"{path}: expected {want}, got {type(value).__name__} {value!r}")
        return default
    return value


def _fill(cls, table: Mapping, section: str, errors: list[str], skip: tuple = ()):
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in table.items():
        if key in skip:
            continue
        if key not in known:
            errors.append(f"{section}.{key}: unknown field")
            continue
        kwargs[key] = _coerce(value, getattr(defaults, key), f"{section}.{key}", errors)
    return kwargs


def _section(doc: Mapping, name: str, errors: list[str]) -> dict:
    table = doc.get(name, {})
    if not isinstance(table, dict):
        errors.append(f"{name}: expected a table")
        return {}
    return table


def _resolve_env(table: Mapping, base_dir: Path, errors: list[str]) -> tuple[EnvConfig | None, TaskTarget | None]:
    known = {"recipe", "book", "target", "target_count", "spawn", *ENV_SCALARS}
    for key in table:
        if key not in known:
            errors.append(f"env.{key}: unknown field")
    env = None
    try:
        if "book" in table:
            env = env_config_from_dict(table["book"])
        elif "recipe" in table:
            path = Path(table["recipe"])
            env = load_env_config(path if path.is_absolute() else base_dir / path)
        else:
            env = default_env_config()
    except ConfigError as exc:
        where = "env.book" if "book" in table else "env.recipe"
        errors.append(f"{where}: {exc}")
        return None, None
    overrides = {}
    defaults = EnvConfig(recipe_book=(), spawn={})
    for key in ENV_SCALARS:
        if key in table:
            overrides[key] = _coerce(table[key], getattr(defaults, key), f"env.{key}", errors)
    if "spawn" in table:
        try:
            overrides["spawn"] = env_config_from_dict({"schema_version": env.schema_version, "skill": [], "spawn": table["spawn"]}).spawn
        except (ConfigError, TypeError, ValueError) as exc:
            errors.append(f"env.spawn: {exc}")
    env = dataclasses.replace(env, **overrides)
    target = None
    item = table.get("target", "stick")
    count = table.get("target_count", 1)
    if not isinstance(item, str):
        errors.append(f"env.target: expected str, got {item!r}")
    elif not isinstance(count, int) or count < 1:
        errors.append(f"env.target_count: must be a positive integer, got {count!r}")
    else:
        target = TaskTarget(item, count)
    return env, target


def resolve(doc: Mapping, base_dir: str | Path = ".") -> RunConfig:
    """Build a validated RunConfig from a parsed document; raises ConfigError listing every problem."""
    errors: list[str] = []
    for key in doc:
        if key not in SECTIONS:
            errors.append(f"{key}: unknown section (expected one of {', '.join(SECTIONS)})")
    env, target = _resolve_env(_section(doc, "env", errors), Path(base_dir), errors)

    train = TrainConfig(**_fill(TrainConfig, _section(doc, "train", errors), "train", errors))
    try:
        train.validate()
    except ConfigError as exc:
        errors.extend(f"train: {msg}" for msg in str(exc).split("; "))

    policy = None
    ptable = _fill(PolicyConfig, _section(doc, "policy", errors), "policy", errors)
    try:
        policy = PolicyConfig(**ptable)
        if policy.embed_dim < 1 or policy.token_dim < 0 or not policy.hidden or min(policy.hidden) < 1:
            errors.append("policy: hidden sizes and embed_dim must be >= 1, token_dim >= 0")
        if policy.activation not in ("tanh", "relu", "linear"):
            errors.append(f"policy.activation: unknown activation {policy.activation!r}")
    except Exception as exc:  # PolicyConfig validates its own fields
        errors.append(f"policy: {exc}")

    rtable = _section(doc, "referee", errors)
    rkw = _fill(RefereeSettings, rtable, "referee", errors, skip=("rewards",))
    referee = RefereeSettings(**rkw)
    if "rewards" in rtable:
        r = rtable["rewards"]
        unknown = set(r) - {"a", "b", "c", "d"} if isinstance(r, dict) else {"<not a table>"}
        if unknown:
            errors.append(f"referee.rewards: unknown keys {sorted(unknown)}")
        else:
            try:
                referee.rewards = RewardScalars(**{k: float(v) for k, v in r.items()})
            except (ConfigError, TypeError, ValueError) as exc:
                errors.append(f"referee.rewards: {exc}")
    if referee.backend not in ("oracle", "llm"):
        errors.append(f"referee.backend: must be 'oracle' or 'llm', got {referee.backend!r}")
    if referee.backend == "llm" and not referee.url:
        errors.append("referee.url: required when backend = 'llm'")
    if not 0.0 <= referee.flip_prob <= 1.0:
        errors.append("referee.flip_prob: must lie in [0, 1]")

    run = RunSettings(**_fill(RunSettings, _section(doc, "run", errors), "run", errors))
    if run.eval_episodes < 1:
        errors.append("run.eval_episodes: must be >= 1")
    if run.eval_mode not in ("greedy", "sample"):
        errors.append("run.eval_mode: must be 'greedy' or 'sample'")

    ablate = AblateSettings(**_fill(AblateSettings, _section(doc, "ablate", errors), "ablate", errors))
    bad_modes = [m for m in ablate.modes if m not in REWARD_MODES]
    if bad_modes:
        errors.append(f"ablate.modes: unknown reward modes {bad_modes}")

    if env is not None and target is not None:
        try:
            CraftWorld(env).check_target(target)
        except ConfigError as exc:
            errors.append(f"env: {exc}")
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    return RunConfig(env, target, train, policy, referee, run, ablate)


def check_ablation(cfg: RunConfig) -> None:
    """Each ladder task must be producible and fit its (possibly per-task) horizon.

    Kept out of ``resolve`` so that a custom recipe book can train and evaluate
    without also carrying the default ladder."""
    errors = []
    for item in cfg.ablate.tasks:
        h = int(cfg.ablate.horizon.get(item, cfg.env.horizon))
        try:
            CraftWorld(dataclasses.replace(cfg.env, horizon=h)).check_target(TaskTarget(item))
        except ConfigError as exc:
            errors.append(f"ablate.horizon.{item}: {exc}")
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b.c=value`` with the value read as a TOML literal, falling back to a bare string."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {text!r}: expected dotted.path=value")
    path = [p.strip() for p in key.split(".")]
    try:
        value = tomli.loads(f"v = {raw.strip()}")["v"]
    except tomli.TOMLDecodeError:
        value = raw.strip()
    return path, value


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    for text in overrides:
        path, value = parse_override(text)
        node = doc
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r}: {part} is not a table")
        node[path[-1]] = value
    return doc


def read_document(path: str | Path | None) -> tuple[dict, Path]:
    """Parse a config file (an empty document when ``path`` is None)."""
    if path is None:
        return {}, Path.cwd()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    with path.open("rb") as fh:
        try:
            return tomli.load(fh), path.resolve().parent
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None


def load_run_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    doc, base = read_document(path)
    return resolve(apply_overrides(doc, list(overrides or [])), base)
