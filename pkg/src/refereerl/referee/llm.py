"""Referee backed by an external chat-completion endpoint."""

from __future__ import annotations

import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Mapping, Sequence

import requests

from ..errors import ConfigError
from .base import Referee, RefereeQuery, RefereeVerdict, RewardScalars

log = logging.getLogger(__name__)

PROMPT_VERSION = "referee_v1"
_LETTER = re.compile(r"(?<![A-Za-z0-9])([ABCD])(?![A-Za-z0-9])")


def load_prompt(version: str = PROMPT_VERSION) -> tuple[str, str]:
    """Return the (system, user) halves of a versioned prompt asset."""
    text = resources.files("refereerl.referee").joinpath("prompts", f"{version}.txt").read_text()
    head, _, user = text.partition("[user]\n")
    system = head.removeprefix("[system]\n")
    return system.strip(), user.strip()


def parse_category(reply: str | None) -> str | None:
    """First standalone A/B/C/D in the reply, or None."""
    if not reply:
        return None
    m = _LETTER.search(reply)
    return m.group(1) if m else None


def _fmt_counts(counts: Mapping[str, int]) -> str:
    if not counts:
        return "(empty)"
    return ", ".join(f"{k} x{v}" for k, v in sorted(counts.items()))


def render_messages(query: RefereeQuery, version: str = PROMPT_VERSION) -> list[dict]:
    system, user = load_prompt(version)
    t = query.target
    user = user.format(
        target=f"{t.target_item} x{t.target_count}",
        inventory_before=_fmt_counts(query.state_before.inventory),
        nearby_before=_fmt_counts(query.state_before.nearby),
        skill=query.action,
        inventory_after=_fmt_counts(query.state_after.inventory),
        nearby_after=_fmt_counts(query.state_after.nearby),
    )
    return [{"role": "system", "content": system}, {"role": "user", "content": user}]


@dataclass
class EndpointConfig:
    url: str
    model: str = "gpt-4"
    api_key_env: str = "REFEREE_API_KEY"
    timeout: float = 30.0
    max_attempts: int = 3
    backoff: float = 1.0
    max_concurrency: int = 4
    prompt_version: str = PROMPT_VERSION


class TransportError(RuntimeError):
    pass


def http_transport(url: str, payload: dict, headers: dict, timeout: float) -> str:
    try:
        resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
    except requests.RequestException as exc:
        raise TransportError(str(exc)) from exc
    if resp.status_code != 200:
        raise TransportError(f"HTTP {resp.status_code}")
    try:
        return resp.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise TransportError(f"malformed completion body: {exc}") from exc


class LLMReferee(Referee):
    name = "llm"

    def __init__(
        self,
        endpoint: EndpointConfig,
        scalars: RewardScalars | None = None,
        transport: Callable[[str, dict, dict, float], str] = http_transport,
        sleep: Callable[[float], None] = time.sleep,
    ):
        super().__init__(scalars)
        self.endpoint = endpoint
        key = os.environ.get(endpoint.api_key_env)
        if not key:
            raise ConfigError(f"referee credential variable {endpoint.api_key_env!r} is not set")
        self._headers = {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}
        self.transport = transport
        self.sleep = sleep
        self.fallback_count = 0
        self._cache: dict[tuple, RefereeVerdict] = {}

    def payload(self, query: RefereeQuery) -> dict:
        return {
            "model": self.endpoint.model,
            "messages": render_messages(query, self.endpoint.prompt_version),
            "temperature": 0,
        }

    def judge(self, query: RefereeQuery) -> RefereeVerdict:
        self.query_count += 1
        key = query.cache_key()
        if key in self._cache:
            return self._cache[key]
        payload = self.payload(query)
        problem = ""
        for attempt in range(self.endpoint.max_attempts):
            if attempt:
                self.sleep(self.endpoint.backoff * 2 ** (attempt - 1))
            try:
                reply = self.transport(self.endpoint.url, payload, self._headers, self.endpoint.timeout)
            except TransportError as exc:
                problem = f"transport: {exc}"
                log.warning("referee request failed (attempt %d): %s", attempt + 1, exc)
                continue
            cat = parse_category(reply)
            if cat is not None:
                verdict = self.verdict(cat)
                self._cache[key] = verdict
                return verdict
            problem = f"unparseable reply: {reply!r:.80}"
        self.fallback_count += 1
        # fallbacks are not cached so a later query can still get a real answer
        return self.verdict("C", fallback=True, note=problem)

    def judge_many(self, queries: Sequence[RefereeQuery]) -> list[RefereeVerdict]:
        if len(queries) <= 1 or self.endpoint.max_concurrency <= 1:
            return [self.judge(q) for q in queries]
        with ThreadPoolExecutor(max_workers=self.endpoint.max_concurrency) as pool:
            return list(pool.map(self.judge, queries))
