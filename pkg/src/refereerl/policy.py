"""Dual-head actor-critic over a shared body with a learned skill token.

The body reads the (log-scaled) observation together with a trainable token
vector. Its output feeds two linear heads: the action head produces a query
vector that is matched against a table of per-skill embeddings (dot product,
or scaled cosine similarity), and the critic head produces the state value.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .approx import MLP, ParameterSet, load_checkpoint, orthogonal, save_checkpoint
from .errors import UsageError


@dataclass
class PolicyConfig:
    hidden: tuple[int, ...] = (128, 128)
    activation: str = "tanh"
    token_dim: int = 8
    embed_dim: int = 32
    similarity: str = "dot"  # or "cosine"
    cosine_scale: float = 10.0
    body_gain: float = float(np.sqrt(2.0))
    head_gain: float = 0.01

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.similarity not in ("dot", "cosine"):
            raise UsageError(f"unknown similarity {self.similarity!r}")


@dataclass
class PolicyOutput:
    action_logits: np.ndarray
    value: float
    log_prob: dict[str, float] = field(default_factory=dict)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class ActorCritic:
    def __init__(self, obs_dim: int, skills: Sequence[str], config: PolicyConfig | None = None, seed: int = 0):
        self.config = config or PolicyConfig()
        self.obs_dim = obs_dim
        self.skills = list(skills)
        if self.skills != sorted(self.skills):
            raise UsageError("skill ids must be given in sorted order")
        self.skill_index = {s: i for i, s in enumerate(self.skills)}
        c = self.config
        self.body = MLP(obs_dim, c.hidden, c.activation, token_dim=c.token_dim)
        h = self.body.out_dim
        layout = self.body.layout() + [
            ("action_head.w", (c.embed_dim, h)),
            ("action_head.b", (c.embed_dim,)),
            ("critic_head.w", (1, h)),
            ("critic_head.b", (1,)),
            ("skill_embed", (len(self.skills), c.embed_dim)),
        ]
        self.params = ParameterSet(layout)
        rng = np.random.default_rng(seed)
        self.body.init(self.params, rng, c.body_gain)
        p = self.params
        p["action_head.w"][:] = orthogonal(p["action_head.w"].shape, c.head_gain, rng)
        p["critic_head.w"][:] = orthogonal(p["critic_head.w"].shape, c.head_gain, rng)
        p["skill_embed"][:] = orthogonal(p["skill_embed"].shape, 1.0, rng)
        p.touch()

    @property
    def n_skills(self) -> int:
        return len(self.skills)

    def forward(self, obs: np.ndarray, params: ParameterSet | None = None):
        """Batched logits and values for a (B, obs_dim) observation matrix."""
        params = self.params if params is None else params
        obs = np.asarray(obs, dtype=np.float64)
        if obs.ndim != 2 or obs.shape[1] != self.obs_dim:
            raise UsageError(f"expected observations of width {self.obs_dim}, got shape {obs.shape}")
        feats, body_cache = self.body.forward(params, np.log1p(np.maximum(obs, 0.0)))
        q = feats @ params["action_head.w"].T + params["action_head.b"]
        e = params["skill_embed"]
        if self.config.similarity == "dot":
            logits = q @ e.T
            aux = None
        else:
            qn = np.linalg.norm(q, axis=1, keepdims=True) + 1e-12
            en = np.linalg.norm(e, axis=1, keepdims=True) + 1e-12
            cos = (q / qn) @ (e / en).T
            logits = self.config.cosine_scale * cos
            aux = (qn, en, cos)
        values = (feats @ params["critic_head.w"].T)[:, 0] + params["critic_head.b"][0]
        return logits, values, (params, body_cache, feats, q, aux)

    def backward(self, cache, dlogits: np.ndarray, dvalues: np.ndarray):
        """Gradient of sum(logits * dlogits) + sum(values * dvalues) w.r.t. all parameters."""
        params, body_cache, feats, q, aux = cache
        grads = params.zeros_like()
        e = params["skill_embed"]
        if aux is None:
            dq = dlogits @ e
            grads["skill_embed"][:] = dlogits.T @ q
        else:
            qn, en, cos = aux
            s = self.config.cosine_scale
            qh, eh = q / qn, e / en
            g = s * dlogits
            # d cos / d q = (eh - cos * qh) / |q|, and symmetrically for e
            dq = (g @ eh - (g * cos).sum(axis=1, keepdims=True) * qh) / qn
            de = (g.T @ qh - (g * cos).sum(axis=0)[:, None] * eh) / en
            grads["skill_embed"][:] = de
        grads["action_head.w"][:] = dq.T @ feats
        grads["action_head.b"][:] = dq.sum(axis=0)
        grads["critic_head.w"][:] = dvalues[None, :] @ feats
        grads["critic_head.b"][:] = dvalues.sum()
        dfeats = dq @ params["action_head.w"] + dvalues[:, None] * params["critic_head.w"]
        self.body.backward(params, body_cache, dfeats, grads)
        return grads

    def output(self, obs: np.ndarray) -> PolicyOutput:
        logits, values, _ = self.forward(np.atleast_2d(obs))
        lp = log_softmax(logits[0])
        return PolicyOutput(logits[0], float(values[0]), dict(zip(self.skills, lp.tolist())))

    def act_batch(self, obs: np.ndarray, rng: np.random.Generator, mode: str = "sample"):
        """Indices, log-probs and values for a batch of observations."""
        logits, values, _ = self.forward(obs)
        logp = log_softmax(logits)
        if mode == "greedy":
            idx = logits.argmax(axis=1)  # first maximum = lexicographically smallest id
        elif mode == "sample":
            cdf = np.cumsum(np.exp(logp), axis=1)
            u = rng.random(len(obs)) * cdf[:, -1]
            idx = (cdf < u[:, None]).sum(axis=1)
            idx = np.minimum(idx, self.n_skills - 1)
        else:
            raise UsageError(f"unknown mode {mode!r}")
        return idx, logp[np.arange(len(obs)), idx], values

    def act(self, obs: np.ndarray, rng: np.random.Generator, mode: str = "sample") -> tuple[str, float, float]:
        idx, lp, v = self.act_batch(np.atleast_2d(obs), rng, mode)
        return self.skills[int(idx[0])], float(lp[0]), float(v[0])

    def evaluate(self, obs: np.ndarray, actions: Sequence[str] | np.ndarray):
        """Log-probs of the given actions, values and per-row entropies."""
        idx = self.action_indices(actions)
        logits, values, _ = self.forward(np.atleast_2d(obs))
        logp = log_softmax(logits)
        ent = -(np.exp(logp) * logp).sum(axis=1)
        return logp[np.arange(len(idx)), idx], values, ent

    def action_indices(self, actions) -> np.ndarray:
        if isinstance(actions, np.ndarray) and actions.dtype.kind in "iu":
            idx = actions
        else:
            try:
                idx = np.array([self.skill_index[a] for a in actions], dtype=int)
            except KeyError as exc:
                raise UsageError(f"unknown action id {exc}") from None
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_skills):
            raise UsageError("action index out of range")
        return idx

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        meta = {
            "kind": "policy",
            "obs_dim": self.obs_dim,
            "skills": self.skills,
            "policy_config": {**asdict(self.config), "hidden": list(self.config.hidden)},
        }
        meta.update(extra or {})
        save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path: str | Path) -> tuple["ActorCritic", dict]:
        params, meta = load_checkpoint(path)
        if meta.get("kind") != "policy":
            raise UsageError(f"{path}: not a policy checkpoint")
        policy = cls(meta["obs_dim"], meta["skills"], PolicyConfig(**meta["policy_config"]))
        policy.params.check_layout(params)
        policy.params = params
        return policy, meta
