"""Chat-completion boundary: HTTP client, prompt rendering, proposer and plausibility gate."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from importlib import resources
from string import Template
from typing import Callable, Mapping

import httpx

from ..errors import BudgetExhausted, ConfigError, RuleError, TransportError
from ..grammar import Rule, parse_rule, serialize_rule
from .heuristic import Candidate
from .tools import ProposalContext

log = logging.getLogger(__name__)

PROMPTS = ("feature_proposal", "plausibility_review", "score_construction", "score_refinement")
RETRY_STATUS = frozenset({408, 409, 425, 429, 500, 502, 503, 504})


def load_prompt(name: str) -> Template:
    if name not in PROMPTS:
        raise KeyError(f"no prompt asset named {name!r}")
    text = resources.files(__package__).joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")
    return Template(text)


def render_prompt(name: str, fields: Mapping[str, object]) -> str:
    """Substitute every placeholder; a missing field is a programming error."""
    return load_prompt(name).substitute({k: str(v) for k, v in fields.items()})


@dataclass(frozen=True)
class EndpointConfig:
    url: str
    model: str
    token_env: str = "CHECKSCORE_API_TOKEN"
    temperature: float = 1.0
    max_tokens: int = 1024
    timeout: float = 60.0
    max_attempts: int = 5
    backoff: float = 1.0
    system_prompt: str = "You are a careful clinical data scientist. Follow output formats exactly."

    @classmethod
    def from_mapping(cls, m: Mapping) -> "EndpointConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(m) - known
        if extra:
            raise ConfigError(f"unknown endpoint keys: {sorted(extra)}")
        if "url" not in m or "model" not in m:
            raise ConfigError("endpoint config needs 'url' and 'model'")
        cfg = cls(**m)
        if cfg.max_attempts < 1:
            raise ConfigError("max_attempts must be at least 1")
        return cfg


@dataclass
class CallBudget:
    """Per-fold caps on remote calls, by purpose."""

    caps: dict = field(default_factory=lambda: {"proposal": 100, "plausibility": 100, "assembly": 21})
    used: dict = field(default_factory=dict)

    def spend(self, kind: str) -> None:
        cap = self.caps.get(kind)
        if cap is None:
            raise KeyError(kind)
        if self.used.get(kind, 0) >= cap:
            raise BudgetExhausted(f"{kind} budget of {cap} calls used up")
        self.used[kind] = self.used.get(kind, 0) + 1

    def remaining(self, kind: str) -> int:
        return self.caps[kind] - self.used.get(kind, 0)

    @property
    def total_cap(self) -> int:
        return sum(self.caps.values())

    @property
    def total_used(self) -> int:
        return sum(self.used.values())


class ChatClient:
    """Single-turn chat-completion client with bounded exponential backoff.

    ``transport`` lets tests plug in an :class:`httpx.MockTransport`; ``sleep``
    is injectable so retries do not slow the suite down.
    """

    def __init__(self, endpoint: EndpointConfig, budget: CallBudget | None = None,
                 transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.endpoint = endpoint
        self.budget = budget or CallBudget()
        self._sleep = sleep
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(endpoint.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._http = httpx.Client(timeout=endpoint.timeout, headers=headers, transport=transport)
        self.requests = 0

    def close(self) -> None:
        self._http.close()

    def complete(self, prompt: str, kind: str) -> str:
        self.budget.spend(kind)
        ep = self.endpoint
        body = {
            "model": ep.model,
            "temperature": ep.temperature,
            "max_tokens": ep.max_tokens,
            "messages": [
                {"role": "system", "content": ep.system_prompt},
                {"role": "user", "content": prompt},
            ],
        }
        last = "no attempt made"
        for attempt in range(ep.max_attempts):
            if attempt:
                self._sleep(ep.backoff * 2 ** (attempt - 1))
            self.requests += 1
            try:
                resp = self._http.post(ep.url, json=body)
            except httpx.TransportError as exc:
                last = f"{type(exc).__name__}: {exc}"
                continue
            if resp.status_code in RETRY_STATUS:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise TransportError(f"HTTP {resp.status_code} from {ep.url}")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise TransportError(f"unexpected response shape: {exc}") from exc
        raise TransportError(f"gave up after {ep.max_attempts} attempts ({last})")


def _strip_fences(text: str) -> list[str]:
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.strip().startswith("```")]


class RemoteProposer:
    name = "remote"

    def __init__(self, client: ChatClient, catalog=None, max_depth: int = 1):
        self.client = client
        self.catalog = catalog
        self.max_depth = max_depth
        self.malformed = 0

    def propose(self, ctx: ProposalContext, batch: int = 3, seed=None) -> list[Candidate]:
        """One request; each response line is parsed independently and never repaired."""
        prompt = render_prompt("feature_proposal", ctx.prompt_fields())
        text = self.client.complete(prompt, "proposal")
        out = []
        for line in _strip_fences(text):
            try:
                rule = parse_rule(line, self.catalog, self.max_depth)
            except RuleError as exc:
                self.malformed += 1
                out.append(Candidate(self.name, line, None, f"{type(exc).__name__}: {exc}"))
                continue
            out.append(Candidate(self.name, line, rule))
        return out


def propose_remote(ctx: ProposalContext, client: ChatClient, catalog=None, max_depth: int = 1) -> list[Rule]:
    cands = RemoteProposer(client, catalog, max_depth).propose(ctx)
    return [c.rule for c in cands if c.rule is not None]


@dataclass(frozen=True)
class PlausibilityVerdict:
    plausible: bool
    reason: str


def parse_verdict(text: str) -> PlausibilityVerdict:
    body = "\n".join(_strip_fences(text))
    try:
        obj = json.loads(body)
    except json.JSONDecodeError:
        return PlausibilityVerdict(False, "gate-parse-failure")
    if not isinstance(obj, dict) or not isinstance(obj.get("plausible"), bool):
        return PlausibilityVerdict(False, "gate-parse-failure")
    return PlausibilityVerdict(obj["plausible"], str(obj.get("reason", "")))


def plausibility_gate(rule: Rule, mode: str = "accept_all", client: ChatClient | None = None) -> PlausibilityVerdict:
    """Binary accept/reject on a statistically admitted rule; the rule itself is untouched."""
    if mode == "accept_all":
        return PlausibilityVerdict(True, "accept_all")
    if mode != "remote":
        raise ValueError(f"unknown plausibility mode {mode!r}")
    if client is None:
        raise ValueError("remote plausibility review needs a client")
    try:
        text = client.complete(render_prompt("plausibility_review", {"rule_json": serialize_rule(rule)}), "plausibility")
    except BudgetExhausted:
        return PlausibilityVerdict(False, "gate-budget-exhausted")
    except TransportError as exc:
        log.warning("plausibility review failed: %s", exc)
        return PlausibilityVerdict(False, "gate-transport-failure")
    return parse_verdict(text)
