"""PPO with an auxiliary referee reward added to the environment reward.

Each iteration collects ``rollout_steps`` transitions from every parallel
environment, asking the referee about each one, computes GAE over the summed
reward, and runs ``update_epochs`` passes of minibatched clipped-surrogate,
critic and entropy updates.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .approx import make_optimizer
from .craftworld import CraftWorld, TaskTarget, WorldState, write_trace_csv
from .errors import ConfigError, UsageError
from .policy import ActorCritic, PolicyConfig, log_softmax
from .referee import (
    BinaryReferee,
    EndpointConfig,
    LLMReferee,
    NoisyReferee,
    OracleReferee,
    Referee,
    RefereeQuery,
    RewardScalars,
)

log = logging.getLogger(__name__)

REWARD_MODES = ("ER", "ER+LAR", "ER+AR2", "ER+AR4")

METRIC_COLUMNS = (
    "iteration",
    "env_steps",
    "mean_return",
    "success_rate",
    "actor_loss",
    "critic_loss",
    "entropy",
    "mean_abs_advantage",
    "referee_query_count",
)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    rollout_steps: int = 128
    num_envs: int = 8
    update_epochs: int = 4
    minibatch_size: int = 64
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    lr: float = 3e-4
    optimizer: str = "adam"
    max_grad_norm: float = 0.5
    normalize_advantages: bool = True
    critic_target: str = "td"
    iterations: int = 100
    reward_mode: str = "ER"
    seed: int = 0
    checkpoint_every: int = 0

    def validate(self) -> None:
        problems = []
        if not 0 < self.gamma < 1:
            problems.append("gamma must lie in (0, 1)")
        if not 0 < self.lam < 1:
            problems.append("lam must lie in (0, 1)")
        if self.clip_eps <= 0:
            problems.append("clip_eps must be > 0")
        for name in ("rollout_steps", "num_envs", "update_epochs", "minibatch_size", "iterations"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.reward_mode not in REWARD_MODES:
            problems.append(f"reward_mode must be one of {', '.join(REWARD_MODES)}")
        if self.critic_target not in ("td", "gae"):
            problems.append("critic_target must be 'td' or 'gae'")
        if self.lr < 0 or self.value_coef < 0 or self.entropy_coef < 0:
            problems.append("lr, value_coef and entropy_coef must be >= 0")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class Transition:
    state: WorldState
    obs: np.ndarray
    action: str
    next_state: WorldState
    env_reward: float
    aux_reward: float
    log_prob_old: float
    value_old: float
    done: bool
    category: str = ""
    fallback: bool = False


@dataclass
class RolloutBuffer:
    """Transitions of one iteration, stored worker-major: index = worker * steps + step."""

    num_envs: int
    steps: int
    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    env_rewards: np.ndarray
    aux_rewards: np.ndarray
    terminal: np.ndarray  # target reached: no bootstrap
    truncated: np.ndarray  # horizon reached: bootstrap from the final state
    truncation_values: np.ndarray
    last_values: np.ndarray  # V of each worker's state after the window
    transitions: list[Transition] = field(default_factory=list)
    advantages: np.ndarray | None = None
    value_targets: np.ndarray | None = None
    critic_targets: np.ndarray | None = None

    @property
    def episode_ends(self) -> np.ndarray:
        return self.terminal | self.truncated


def compute_gae(rewards, values, dones, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates.

    ``values`` holds one more entry than ``rewards``: the bootstrap value of the
    state after the last step (pass 0 when that step ended the episode).
    ``dones[t]`` marks that the episode ended after step t, which cuts both the
    bootstrap and the backward accumulation.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    n = len(rewards)
    if values.shape != (n + 1,) or dones.shape != (n,):
        raise UsageError("compute_gae needs len(values) == len(rewards) + 1 == len(dones) + 1")
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        cont = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * values[t + 1] * cont - values[t]
        running = delta + gamma * lam * cont * running
        adv[t] = running
    return adv, adv + values[:n]


def critic_loss(values_pred, rewards, values_next, gamma: float) -> float:
    v = np.asarray(values_pred, dtype=np.float64)
    target = np.asarray(rewards, dtype=np.float64) + gamma * np.asarray(values_next, dtype=np.float64)
    return float(np.mean((v - target) ** 2))


def clipped_actor_loss(log_probs_new, log_probs_old, advantages, clip_eps: float) -> float:
    ratio = np.exp(np.asarray(log_probs_new) - np.asarray(log_probs_old))
    adv = np.asarray(advantages, dtype=np.float64)
    surrogate = np.minimum(ratio * adv, np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * adv)
    return float(-surrogate.mean())


@dataclass
class LossStats:
    total: float
    actor: float
    critic: float
    entropy: float


def ppo_loss(
    policy: ActorCritic,
    obs: np.ndarray,
    actions: np.ndarray,
    log_probs_old: np.ndarray,
    advantages: np.ndarray,
    critic_targets: np.ndarray,
    cfg: TrainConfig,
    params=None,
    need_grad: bool = True,
):
    """Combined minibatch loss ``actor + value_coef*critic - entropy_coef*entropy``.

    Returns ``(LossStats, grads)``; ``grads`` is None when ``need_grad`` is false.
    """
    logits, values, cache = policy.forward(obs, params)
    b = len(actions)
    rows = np.arange(b)
    logp_all = log_softmax(logits)
    probs = np.exp(logp_all)
    logp = logp_all[rows, actions]
    ratio = np.exp(logp - log_probs_old)
    clipped = np.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps)
    unclipped_term = ratio * advantages
    actor = -np.mean(np.minimum(unclipped_term, clipped * advantages))
    entropy_rows = -(probs * logp_all).sum(axis=1)
    entropy = entropy_rows.mean()
    value_err = values - critic_targets
    critic = np.mean(value_err**2)
    total = actor + cfg.value_coef * critic - cfg.entropy_coef * entropy
    stats = LossStats(float(total), float(actor), float(critic), float(entropy))
    if not need_grad:
        return stats, None
    # the min picks the unclipped branch whenever it is not larger
    active = unclipped_term <= clipped * advantages
    d_logp = np.where(active, -advantages * ratio / b, 0.0)
    onehot = np.zeros_like(logits)
    onehot[rows, actions] = 1.0
    dlogits = d_logp[:, None] * (onehot - probs)
    # dH/dlogit_j = -p_j (log p_j + H)
    dlogits += (cfg.entropy_coef / b) * probs * (logp_all + entropy_rows[:, None])
    dvalues = cfg.value_coef * 2.0 * value_err / b
    return stats, policy.backward(cache, dlogits, dvalues)


def make_referee(
    mode: str,
    world: CraftWorld,
    seed: int = 0,
    scalars: RewardScalars | None = None,
    backend: str = "oracle",
    flip_prob: float = 0.5,
    endpoint: EndpointConfig | None = None,
) -> Referee | None:
    if mode == "ER":
        return None
    if mode == "ER+LAR":
        return NoisyReferee(world, flip_prob, seed, scalars)
    if mode == "ER+AR2":
        return BinaryReferee(world, scalars)
    if mode == "ER+AR4":
        if backend == "llm":
            if endpoint is None:
                raise ConfigError("llm referee backend needs an endpoint configuration")
            return LLMReferee(endpoint, scalars)
        if backend != "oracle":
            raise ConfigError(f"unknown referee backend {backend!r}")
        return OracleReferee(world, scalars)
    raise ConfigError(f"unknown reward mode {mode!r}")


@dataclass
class TrainResult:
    policy: ActorCritic
    metrics: list[dict]
    checkpoints: list[Path] = field(default_factory=list)


class _Workers:
    """Lock-step parallel environment instances, each with its own random stream."""

    def __init__(self, world: CraftWorld, targets: Sequence[TaskTarget], n: int, seed_seq: np.random.SeedSequence):
        self.world = world
        self.targets = list(targets)
        self.rngs = [np.random.default_rng(s) for s in seed_seq.spawn(n)]
        self.states: list[WorldState] = []
        self.current: list[TaskTarget] = []
        self.last: list[str | None] = []
        for i in range(n):
            tgt, st = self._fresh(i)
            self.states.append(st)
            self.current.append(tgt)
            self.last.append(None)
        self.returns = [0.0] * n

    def _fresh(self, i: int) -> tuple[TaskTarget, WorldState]:
        rng = self.rngs[i]
        tgt = self.targets[int(rng.integers(len(self.targets)))] if len(self.targets) > 1 else self.targets[0]
        return tgt, self.world.reset(tgt, rng)

    def observations(self) -> np.ndarray:
        return np.stack(
            [self.world.observe_vector(s, t, a) for s, t, a in zip(self.states, self.current, self.last)]
        )


def _write_metrics_row(path: Path, row: dict, header: bool) -> None:
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(METRIC_COLUMNS)
        w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def collect(policy: ActorCritic, workers: _Workers, referee: Referee | None, steps: int, rng: np.random.Generator):
    """Roll every worker forward ``steps`` times; returns (buffer, finished episodes)."""
    world = workers.world
    n = len(workers.states)
    obs_dim = world.obs_dim
    obs = np.zeros((steps, n, obs_dim))
    actions = np.zeros((steps, n), dtype=int)
    logps = np.zeros((steps, n))
    values = np.zeros((steps, n))
    env_r = np.zeros((steps, n))
    aux_r = np.zeros((steps, n))
    terminal = np.zeros((steps, n), dtype=bool)
    truncated = np.zeros((steps, n), dtype=bool)
    trunc_v = np.zeros((steps, n))
    records: list[list[Transition]] = [[] for _ in range(n)]
    episodes: list[tuple[float, bool, int]] = []
    for t in range(steps):
        o = workers.observations()
        idx, lp, v = policy.act_batch(o, rng, "sample")
        obs[t], actions[t], logps[t], values[t] = o, idx, lp, v
        skills = [policy.skills[k] for k in idx]
        befores = list(workers.states)
        targets = list(workers.current)
        afters = []
        for i in range(n):
            nxt, r, _ = world.step(befores[i], skills[i], targets[i], workers.rngs[i])
            afters.append(nxt)
            env_r[t, i] = r
        verdicts = [None] * n
        if referee is not None:
            queries = [RefereeQuery(targets[i], befores[i], skills[i], afters[i]) for i in range(n)]
            verdicts = referee.judge_many(queries)
            aux_r[t] = [vd.reward for vd in verdicts]
        cut = []
        for i in range(n):
            nxt, vd = afters[i], verdicts[i]
            success = targets[i].satisfied(nxt.inventory)
            terminal[t, i] = success
            truncated[t, i] = nxt.done and not success
            records[i].append(
                Transition(
                    befores[i], o[i], skills[i], nxt, env_r[t, i], aux_r[t, i], lp[i], v[i], nxt.done,
                    vd.category if vd else "", vd.fallback if vd else False,
                )
            )
            workers.returns[i] += env_r[t, i]
            workers.states[i], workers.last[i] = nxt, skills[i]
            if nxt.done:
                episodes.append((workers.returns[i], success, nxt.steps_elapsed))
                workers.returns[i] = 0.0
                if truncated[t, i]:
                    cut.append(i)
                workers.current[i], workers.states[i] = workers._fresh(i)
                workers.last[i] = None
        if cut:
            # value of the state the horizon cut off, for bootstrapping
            rows = np.stack([world.observe_vector(afters[i], targets[i], skills[i]) for i in cut])
            trunc_v[t, cut] = policy.forward(rows)[1]
    _, last_v, _ = policy.forward(workers.observations())
    buf = RolloutBuffer(
        num_envs=n,
        steps=steps,
        obs=obs.transpose(1, 0, 2).reshape(n * steps, obs_dim),
        actions=actions.T.reshape(-1),
        log_probs=logps.T.reshape(-1),
        values=values.T.reshape(-1),
        env_rewards=env_r.T.reshape(-1),
        aux_rewards=aux_r.T.reshape(-1),
        terminal=terminal.T.reshape(-1),
        truncated=truncated.T.reshape(-1),
        truncation_values=trunc_v.T.reshape(-1),
        last_values=last_v,
        transitions=[tr for rec in records for tr in rec],
    )
    return buf, episodes


def finish_buffer(buf: RolloutBuffer, cfg: TrainConfig) -> RolloutBuffer:
    """Attach advantages and critic targets; GAE runs separately per worker."""
    total = buf.env_rewards + buf.aux_rewards
    # a horizon cut is not a real ending: fold the bootstrap value into the reward
    total = total + cfg.gamma * buf.truncation_values * buf.truncated
    dones = buf.episode_ends
    adv = np.zeros_like(total)
    targets = np.zeros_like(total)
    for w in range(buf.num_envs):
        sl = slice(w * buf.steps, (w + 1) * buf.steps)
        vals = np.append(buf.values[sl], buf.last_values[w])
        adv[sl], _ = compute_gae(total[sl], vals, dones[sl], cfg.gamma, cfg.lam)
        nxt = vals[1:] * ~dones[sl]
        targets[sl] = total[sl] + cfg.gamma * nxt
    buf.advantages = adv
    buf.value_targets = adv + buf.values
    buf.critic_targets = targets if cfg.critic_target == "td" else buf.value_targets
    return buf


def _clip_grad(grads, max_norm: float) -> None:
    if max_norm > 0:
        norm = math.sqrt(float(grads.values @ grads.values))
        if norm > max_norm:
            grads.values *= max_norm / norm


def update(policy: ActorCritic, optimizer, buf: RolloutBuffer, cfg: TrainConfig, rng: np.random.Generator, dump_dir=None) -> dict:
    n = len(buf.actions)
    sums = {"actor": 0.0, "critic": 0.0, "entropy": 0.0}
    count = 0
    for _ in range(cfg.update_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.minibatch_size):
            mb = order[lo : lo + cfg.minibatch_size]
            adv = buf.advantages[mb]
            if cfg.normalize_advantages and len(mb) > 1:
                adv = (adv - adv.mean()) / (adv.std() + 1e-8)
            stats, grads = ppo_loss(
                policy, buf.obs[mb], buf.actions[mb], buf.log_probs[mb], adv, buf.critic_targets[mb], cfg
            )
            if not np.isfinite(stats.total) or not np.all(np.isfinite(grads.values)):
                path = Path(dump_dir or ".") / "nan_minibatch.npz"
                np.savez(
                    path, obs=buf.obs[mb], actions=buf.actions[mb], log_probs_old=buf.log_probs[mb],
                    advantages=adv, critic_targets=buf.critic_targets[mb], params=policy.params.values,
                )
                raise TrainingError(f"non-finite loss {stats}; offending minibatch written to {path}")
            _clip_grad(grads, cfg.max_grad_norm)
            optimizer.step(policy.params, grads)
            sums["actor"] += stats.actor
            sums["critic"] += stats.critic
            sums["entropy"] += stats.entropy
            count += 1
    return {k: v / count for k, v in sums.items()}


def _child_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1)[0])


def train(
    world: CraftWorld,
    target: TaskTarget | Sequence[TaskTarget],
    config: TrainConfig,
    policy: ActorCritic | None = None,
    referee: Referee | None | str = "auto",
    policy_config: PolicyConfig | None = None,
    metrics_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    referee_options: dict | None = None,
    on_iteration: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run referee-augmented PPO; every random stream derives from ``config.seed``."""
    config.validate()
    targets = [target] if isinstance(target, TaskTarget) else list(target)
    for t in targets:
        world.check_target(t)
    ss_policy, ss_env, ss_sample, ss_batch, ss_ref = np.random.SeedSequence(config.seed).spawn(5)
    if policy is None:
        policy = ActorCritic(world.obs_dim, world.skills, policy_config, seed=_child_seed(ss_policy))
    if policy.obs_dim != world.obs_dim or policy.skills != world.skills:
        raise ConfigError("policy dimensions do not match the environment")
    if isinstance(referee, str):
        if referee != "auto":
            raise ConfigError(f"unknown referee spec {referee!r}")
        referee = make_referee(config.reward_mode, world, seed=_child_seed(ss_ref), **(referee_options or {}))
    if config.reward_mode == "ER":
        referee = None
    optimizer = make_optimizer(config.optimizer, config.lr)
    workers = _Workers(world, targets, config.num_envs, ss_env)
    sample_rng = np.random.default_rng(ss_sample)
    batch_rng = np.random.default_rng(ss_batch)
    metrics_path = Path(metrics_path) if metrics_path else None
    if metrics_path and metrics_path.exists():
        metrics_path.unlink()
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    result = TrainResult(policy, [])
    env_steps = 0
    for it in range(1, config.iterations + 1):
        buf, episodes = collect(policy, workers, referee, config.rollout_steps, sample_rng)
        finish_buffer(buf, config)
        env_steps += len(buf.actions)
        losses = update(policy, optimizer, buf, config, batch_rng, dump_dir=ckpt_dir or (metrics_path.parent if metrics_path else None))
        row = {
            "iteration": it,
            "env_steps": env_steps,
            "mean_return": float(np.mean([e[0] for e in episodes])) if episodes else float("nan"),
            "success_rate": float(np.mean([e[1] for e in episodes])) if episodes else float("nan"),
            "actor_loss": losses["actor"],
            "critic_loss": losses["critic"],
            "entropy": losses["entropy"],
            "mean_abs_advantage": float(np.mean(np.abs(buf.advantages))),
            "referee_query_count": referee.query_count if referee is not None else 0,
        }
        result.metrics.append(row)
        if metrics_path:
            _write_metrics_row(metrics_path, row, header=(it == 1))
        if ckpt_dir and config.checkpoint_every and (it % config.checkpoint_every == 0 or it == config.iterations):
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            path = ckpt_dir / f"iter_{it:05d}.ckpt"
            policy.save(path, {"iteration": it, "reward_mode": config.reward_mode})
            result.checkpoints.append(path)
        if on_iteration:
            on_iteration(row)
        log.debug("iter %d: %s", it, row)
    return result


@dataclass
class EvalReport:
    episodes: int
    successes: int
    lengths: list[int]

    @property
    def success_rate(self) -> float:
        return self.successes / self.episodes


def evaluate_policy(
    world: CraftWorld,
    policy: ActorCritic,
    target: TaskTarget,
    episodes: int = 30,
    seed: int = 0,
    mode: str = "greedy",
    trace_dir: str | Path | None = None,
) -> EvalReport:
    """Run ``episodes`` full episodes; optionally write one trace CSV per episode."""
    if episodes < 1:
        raise UsageError("episodes must be >= 1")
    world.check_target(target)
    rng = np.random.default_rng(seed)
    successes, lengths = 0, []
    for ep in range(episodes):
        state = world.reset(target, rng)
        last = None
        rows = []
        while not state.done:
            skill, _, _ = policy.act(world.observe_vector(state, target, last), rng, mode)
            nxt, r, _ = world.step(state, skill, target, rng)
            rows.append((nxt.steps_elapsed, skill, r, state, nxt))
            state, last = nxt, skill
        ok = target.satisfied(state.inventory)
        successes += ok
        lengths.append(state.steps_elapsed)
        if trace_dir is not None:
            Path(trace_dir).mkdir(parents=True, exist_ok=True)
            write_trace_csv(Path(trace_dir) / f"episode_{ep:03d}.csv", rows)
    return EvalReport(episodes, successes, lengths)
