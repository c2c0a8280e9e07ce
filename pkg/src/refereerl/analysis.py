"""How sparse terminal rewards make GAE advantages vanish with distance from the goal.

Under a critic that has fitted the per-step penalty exactly, every TD error is
zero except the last one, which equals the terminal reward R. The advantage at
``offset`` steps before that last step is then ``(gamma * lam) ** offset * R``.
``empirical_vanishment`` measures the same profile with a trained critic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .approx import Adam
from .craftworld import CraftWorld, TaskTarget
from .errors import UsageError
from .policy import ActorCritic, PolicyConfig
from .referee import Referee, RefereeQuery
from .trainer import compute_gae


@dataclass
class VanishmentProfile:
    horizon_offsets: list[int]
    gae_values: list[float]
    closed_form: list[float]
    label: str = ""
    episodes_used: int = 0
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not len(self.horizon_offsets) == len(self.gae_values) == len(self.closed_form):
            raise UsageError("profile series must have equal length")

    @property
    def empty(self) -> bool:
        return not self.horizon_offsets

    def write_csv(self, path: str | Path, series: str = "gae") -> None:
        values = self.gae_values if series == "gae" else self.closed_form
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["offset", "A_t"])
            for k, v in zip(self.horizon_offsets, values):
                w.writerow([k, repr(float(v))])


def sparse_reward_trajectory(T: int, eps: float, R: float) -> np.ndarray:
    """Rewards of a T-step episode that succeeds on its last step."""
    if T < 1:
        raise UsageError("T must be >= 1")
    r = np.full(T, -float(eps))
    r[-1] = R - eps
    return r


def converged_critic_episode(T: int, eps: float, R: float, gamma: float):
    """Rewards, values (with terminal bootstrap 0) and done flags of an episode whose
    critic satisfies V(s_k) - gamma V(s_{k+1}) = -eps before the last step.

    With these values every TD error is 0 except the final one, which is R.
    """
    rewards = sparse_reward_trajectory(T, eps, R)
    values = np.zeros(T + 1)
    values[T - 1] = -eps
    for k in range(T - 2, -1, -1):
        values[k] = -eps + gamma * values[k + 1]
    dones = np.zeros(T, dtype=bool)
    dones[-1] = True
    return rewards, values, dones


def converged_critic_gae(T: int, t: int, gamma: float, lam: float, R: float) -> float:
    if not 0 <= t < T:
        raise UsageError("need 0 <= t < T")
    return (gamma * lam) ** (T - 1 - t) * R


def closed_form_profile(gamma: float, lam: float, R: float, max_offset: int, eps: float = 0.01) -> VanishmentProfile:
    """Closed form next to GAE run on the converged-critic episode of length max_offset+1."""
    T = max_offset + 1
    rewards, values, dones = converged_critic_episode(T, eps, R, gamma)
    adv, _ = compute_gae(rewards, values, dones, gamma, lam)
    offsets = list(range(T))
    return VanishmentProfile(
        horizon_offsets=offsets,
        gae_values=[float(adv[T - 1 - k]) for k in offsets],
        closed_form=[converged_critic_gae(T, T - 1 - k, gamma, lam, R) for k in offsets],
        label="converged critic",
    )


def _rollout(world, target, behavior, referee, rng, max_episodes):
    """Episodes of (obs, env_reward, aux_reward, success) collected with ``behavior``."""
    episodes = []
    for _ in range(max_episodes):
        state = world.reset(target, rng)
        last = None
        obs, env_r, aux_r = [], [], []
        while not state.done:
            o = world.observe_vector(state, target, last)
            if behavior is None:
                skill = world.skills[int(rng.integers(len(world.skills)))]
            else:
                skill, _, _ = behavior.act(o, rng, "sample")
            nxt, r, _ = world.step(state, skill, target, rng)
            aux = referee.judge(RefereeQuery(target, state, skill, nxt)).reward if referee else 0.0
            obs.append(o)
            env_r.append(r)
            aux_r.append(aux)
            state, last = nxt, skill
        final_obs = world.observe_vector(state, target, last)
        episodes.append((np.array(obs), final_obs, np.array(env_r), np.array(aux_r), target.satisfied(state.inventory)))
    return episodes


def fit_critic(critic: ActorCritic, episodes, gamma: float, epochs: int, rng, lr: float = 1e-3, batch: int = 256) -> None:
    """Train only the value head (and body) on the one-step TD loss, target held fixed per batch."""
    obs = np.concatenate([e[0] for e in episodes])
    nxt = np.concatenate([np.vstack([e[0][1:], e[1][None]]) for e in episodes])
    rew = np.concatenate([e[2] + e[3] for e in episodes])
    # the last step of a successful episode is terminal; a horizon cut bootstraps
    term = np.concatenate([np.eye(1, len(e[2]), len(e[2]) - 1)[0].astype(bool) & e[4] for e in episodes])
    opt = Adam(lr)
    n = len(obs)
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch):
            mb = order[lo : lo + batch]
            _, v_next, _ = critic.forward(nxt[mb])
            target = rew[mb] + gamma * v_next * ~term[mb]
            _, v, cache = critic.forward(obs[mb])
            dv = 2.0 * (v - target) / len(mb)
            grads = critic.backward(cache, np.zeros((len(mb), critic.n_skills)), dv)
            opt.step(critic.params, grads)


def empirical_vanishment(
    world: CraftWorld,
    target: TaskTarget,
    gamma: float = 0.99,
    lam: float = 0.95,
    critic_epochs: int = 200,
    episodes: int = 64,
    behavior: ActorCritic | None = None,
    referee: Referee | None = None,
    seed: int = 0,
    policy_config: PolicyConfig | None = None,
    label: str = "",
    min_count: int = 1,
) -> VanishmentProfile:
    """Fit a critic to rollouts of a fixed behaviour policy (uniform random when None),
    then report mean |A_t| by distance from the end of each successful episode.

    Offsets observed in fewer than ``min_count`` successful episodes are dropped.
    """
    rng = np.random.default_rng(seed)
    data = _rollout(world, target, behavior, referee, rng, episodes)
    wins = [e for e in data if e[4]]
    R = world.config.terminal_reward
    if not wins:
        return VanishmentProfile([], [], [], label=label, notes=["no successful episodes within budget"])
    critic = ActorCritic(world.obs_dim, world.skills, policy_config, seed=seed)
    fit_critic(critic, data, gamma, critic_epochs, rng)
    by_offset: dict[int, list[float]] = {}
    for obs, final, env_r, aux_r, _ in wins:
        _, v, _ = critic.forward(obs)
        vals = np.append(v, 0.0)
        dones = np.zeros(len(env_r), dtype=bool)
        dones[-1] = True
        adv, _ = compute_gae(env_r + aux_r, vals, dones, gamma, lam)
        T = len(adv)
        for t in range(T):
            by_offset.setdefault(T - 1 - t, []).append(abs(adv[t]))
    offsets = sorted(k for k, v in by_offset.items() if len(v) >= min_count)
    return VanishmentProfile(
        horizon_offsets=offsets,
        gae_values=[float(np.mean(by_offset[k])) for k in offsets],
        closed_form=[(gamma * lam) ** k * R for k in offsets],
        label=label,
        episodes_used=len(wins),
    )


def decay_rank_correlation(profile: VanishmentProfile, max_offset: int | None = None) -> float:
    """Spearman correlation between measured |A_t| and the closed form (1 = same ordering).

    ``max_offset`` restricts the comparison to offsets where the closed form is
    still above the critic's residual noise.
    """
    pairs = [(g, c) for k, g, c in zip(profile.horizon_offsets, profile.gae_values, profile.closed_form)
             if max_offset is None or k <= max_offset]
    if len(pairs) < 3:
        return float("nan")
    g, c = zip(*pairs)
    return float(spearmanr(g, c).statistic)


def mean_abs_beyond(profile: VanishmentProfile, min_offset: int) -> float:
    vals = [v for k, v in zip(profile.horizon_offsets, profile.gae_values) if k >= min_offset]
    return float(np.mean(vals)) if vals else float("nan")
