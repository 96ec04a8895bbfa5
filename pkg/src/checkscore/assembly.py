"""Checklist selection from the retained pool, bounded refinement, and threshold fixing."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .data import Dataset, FeatureStats
from .errors import (
    AgentSpecInvalid,
    BudgetExhausted,
    EmptyPool,
    RuleError,
    SingleClass,
    SplitViolation,
    TransportError,
)
from .evaluation import EvalReport, rule_truth, select_threshold
from .grammar import (
    Logical,
    QuantileThreshold,
    Rule,
    ZScoreThreshold,
    rule_from_obj,
    rule_text,
    rule_to_obj,
    serialize_rule,
)
from .pool import VALIDATION, RulePool

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Checklist:
    """Unit-weighted N-of-M checklist.  There is deliberately no weight field."""

    rules: tuple
    threshold: int | None = None
    name: str = "checklist"
    description: str = ""
    stats: FeatureStats | None = field(default=None, repr=False, compare=False)
    provenance: Mapping = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.rules:
            raise ValueError("a checklist needs at least one rule")
        if len(set(self.rules)) != len(self.rules):
            raise ValueError("checklist rules must be distinct")
        if self.threshold is not None and not 0 <= self.threshold <= len(self.rules):
            raise ValueError(f"threshold {self.threshold} outside 0..{len(self.rules)}")

    @property
    def size(self) -> int:
        return len(self.rules)

    def spec(self) -> dict:
        """The JSON shape exchanged with the score-construction agent."""
        return {
            "name": self.name,
            "description": self.description,
            "rules": [{"rule": rule_to_obj(r)} for r in self.rules],
        }


def pool_hash(pool: RulePool) -> str:
    h = hashlib.sha256()
    for r in pool.rules:
        h.update(serialize_rule(r).encode())
        h.update(b"\n")
    return h.hexdigest()[:16]


class SubsetScorer:
    """Validation AUROC of arbitrary pool subsets, from a precomputed truth matrix.

    AUROC is the exact Mann-Whitney tally on the integer score, identical to
    :func:`checkscore.evaluation.auroc` on the same scores.
    """

    def __init__(self, pool: RulePool, d_val: Dataset, stats: FeatureStats | None):
        if d_val.split != VALIDATION:
            raise SplitViolation(f"checklist selection reads only the validation split, got {d_val.split!r}")
        y = d_val.y.astype(bool)
        self.P = int(y.sum())
        self.N = len(y) - self.P
        if self.P == 0 or self.N == 0:
            raise SingleClass("validation split needs both classes")
        self.rules = pool.rules
        self.index = {r: i for i, r in enumerate(self.rules)}
        self.truth = np.vstack([rule_truth(r, d_val, stats) for r in self.rules]).astype(np.int16)
        self.y = y
        self.evaluated = 0
        self._cache: dict = {}

    def scores(self, idx: Sequence[int]) -> np.ndarray:
        return self.truth[list(idx)].sum(axis=0)

    def auc(self, idx: Sequence[int]) -> float:
        key = tuple(sorted(idx))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        self.evaluated += 1
        s = self.scores(key)
        k = len(key) + 1
        pos = np.bincount(s[self.y], minlength=k).astype(np.int64)
        neg = np.bincount(s[~self.y], minlength=k).astype(np.int64)
        two_u = int(np.sum(pos * (2 * (np.cumsum(neg) - neg) + neg)))
        val = two_u / (2 * self.P * self.N)
        self._cache[key] = val
        return val

    def indices(self, rules: Sequence[Rule]) -> tuple:
        try:
            return tuple(self.index[r] for r in rules)
        except KeyError as exc:
            raise AgentSpecInvalid(f"rule not in pool: {serialize_rule(exc.args[0])}") from None


class _Best:
    """Argmax tracker; the first candidate seen wins ties."""

    def __init__(self):
        self.idx: tuple | None = None
        self.auc = -math.inf
        self.trace: list = []

    def offer(self, idx: tuple, auc: float, origin: str) -> None:
        if auc > self.auc:
            self.idx, self.auc = idx, auc
            self.trace.append({"origin": origin, "rules": list(idx), "auroc": auc})


# ---------------------------------------------------------------------------
# selection strategies
# ---------------------------------------------------------------------------

def _greedy(sc: SubsetScorer, M: int, best: _Best) -> None:
    chosen: list[int] = []
    remaining = list(range(len(sc.rules)))
    while len(chosen) < M and remaining:
        step_best, step_auc = None, -math.inf
        for i in remaining:  # ascending ordinal, strict > keeps the lowest on ties
            a = sc.auc(chosen + [i])
            if a > step_auc:
                step_best, step_auc = i, a
        chosen.append(step_best)
        remaining.remove(step_best)
        best.offer(tuple(chosen), step_auc, "greedy")


def subset_count(n: int, M: int) -> int:
    return sum(math.comb(n, k) for k in range(1, min(M, n) + 1))


def _exhaustive(sc: SubsetScorer, M: int, best: _Best) -> None:
    n = len(sc.rules)
    for k in range(1, min(M, n) + 1):
        for combo in itertools.combinations(range(n), k):
            best.offer(combo, sc.auc(combo), "exhaustive")


def _pool_listing(pool: RulePool) -> str:
    return "\n".join(
        json.dumps({"rule": rule_to_obj(r.rule), "auroc": round(r.auroc_con, 4)}, sort_keys=True)
        for r in pool.records
    )


def parse_agent_spec(text: str, sc: SubsetScorer, M: int, catalog=None, max_depth: int | None = None) -> tuple[tuple, dict]:
    """Validate an agent-returned checklist spec against the pool; raises AgentSpecInvalid."""
    body = "\n".join(ln for ln in text.splitlines() if not ln.strip().startswith("```"))
    try:
        obj = json.loads(body)
    except json.JSONDecodeError as exc:
        raise AgentSpecInvalid(f"not JSON: {exc}") from None
    if not isinstance(obj, dict) or not isinstance(obj.get("rules"), list):
        raise AgentSpecInvalid("spec must be an object with a 'rules' list")
    rules = []
    for entry in obj["rules"]:
        raw = entry.get("rule") if isinstance(entry, dict) and "rule" in entry else entry
        if isinstance(raw, str):
            try:
                raw = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise AgentSpecInvalid(f"rule is not JSON: {exc}") from None
        try:
            rules.append(rule_from_obj(raw, catalog, max_depth))
        except RuleError as exc:
            raise AgentSpecInvalid(f"invalid rule: {exc}") from None
    if not rules:
        raise AgentSpecInvalid("spec lists no rules")
    if len(rules) > M:
        raise AgentSpecInvalid(f"spec lists {len(rules)} rules, limit is {M}")
    if len(set(rules)) != len(rules):
        raise AgentSpecInvalid("spec repeats a rule")
    meta = {"name": str(obj.get("name", "checklist")), "description": str(obj.get("description", ""))}
    return sc.indices(rules), meta


def _agent(sc: SubsetScorer, pool: RulePool, M: int, best: _Best, client, task_description: str) -> dict:
    from .proposal.remote import render_prompt

    prompt = render_prompt(
        "score_construction",
        {"task_description": task_description, "max_rules": M, "retained_rules_with_auc": _pool_listing(pool)},
    )
    try:
        text = client.complete(prompt, "assembly")
    except (TransportError, BudgetExhausted) as exc:
        raise AgentSpecInvalid(f"no usable agent response: {exc}") from exc
    idx, meta = parse_agent_spec(text, sc, M)
    best.offer(idx, sc.auc(idx), "agent")
    return meta


def assemble(
    pool: RulePool,
    M: int,
    d_val: Dataset,
    stats: FeatureStats | None = None,
    mode: str = "greedy",
    *,
    exhaustive_cap: int = 200_000,
    client=None,
    task_description: str = "",
    fold: int | None = None,
    scorer: SubsetScorer | None = None,
) -> Checklist:
    """Pick up to ``M`` pool rules maximising validation AUROC.

    Whatever the mode, the result is the best-by-validation-AUROC subset among
    all subsets the mode evaluated.
    """
    if len(pool) == 0:
        raise EmptyPool("cannot assemble a checklist from an empty pool")
    if M < 1:
        raise ValueError("M must be at least 1")
    sc = scorer or SubsetScorer(pool, d_val, stats)
    best = _Best()
    meta = {"name": "checklist", "description": ""}
    used = mode
    if mode == "exhaustive":
        if subset_count(len(pool), M) <= exhaustive_cap:
            _exhaustive(sc, M, best)
        else:
            log.info("exhaustive enumeration exceeds cap %d; using greedy", exhaustive_cap)
            used = "greedy"
            _greedy(sc, M, best)
    elif mode == "agent":
        try:
            if client is None:
                raise AgentSpecInvalid("agent assembly needs a client")
            meta = _agent(sc, pool, M, best, client, task_description)
        except AgentSpecInvalid as exc:
            log.warning("agent checklist rejected (%s); falling back to greedy", exc)
            used = "greedy-fallback"
            _greedy(sc, M, best)
    elif mode == "greedy":
        _greedy(sc, M, best)
    else:
        raise ValueError(f"unknown assembly mode {mode!r}")
    rules = tuple(sc.rules[i] for i in best.idx)
    prov = {
        "pool_hash": pool_hash(pool),
        "fold": fold,
        "mode": used,
        "val_auroc": best.auc,
        "subsets_evaluated": sc.evaluated,
        "trace": best.trace,
    }
    return Checklist(rules, None, meta["name"], meta["description"], stats, prov)


# ---------------------------------------------------------------------------
# refinement
# ---------------------------------------------------------------------------

def _neighbours(cur: tuple, n: int, M: int):
    """Single add / drop / swap moves, in a fixed order."""
    inside = set(cur)
    outside = [i for i in range(n) if i not in inside]
    if len(cur) < M:
        for i in outside:
            yield tuple(sorted(cur + (i,)))
    if len(cur) > 1:
        for j in cur:
            yield tuple(i for i in cur if i != j)
    for j in cur:
        for i in outside:
            yield tuple(sorted([k for k in cur if k != j] + [i]))


def _offline_step(sc: SubsetScorer, cur: tuple, M: int) -> tuple | None:
    cur_auc = sc.auc(cur)
    step_best, step_auc = None, cur_auc
    for cand in _neighbours(cur, len(sc.rules), M):
        a = sc.auc(cand)
        if a > step_auc:
            step_best, step_auc = cand, a
    return step_best


def _agent_step(sc: SubsetScorer, c: Checklist, cur: tuple, M: int, client) -> tuple | None:
    from .proposal.remote import render_prompt

    s = sc.scores(cur)
    K, rep = select_threshold(s, sc.y.astype(np.int8), max_score=len(cur))
    metrics = {"val_auroc": round(sc.auc(cur), 4), "threshold": K,
               "sensitivity": round(rep.sensitivity, 4), "specificity": round(rep.specificity, 4)}
    spec = dict(c.spec(), rules=[{"rule": rule_to_obj(sc.rules[i])} for i in cur])
    prompt = render_prompt(
        "score_refinement",
        {"current_score_json": json.dumps(spec, sort_keys=True), "score_metrics": json.dumps(metrics, sort_keys=True),
         "max_rules": M},
    )
    try:
        text = client.complete(prompt, "assembly")
        idx, _ = parse_agent_spec(text, sc, M)
    except (AgentSpecInvalid, TransportError, BudgetExhausted) as exc:
        log.info("refinement proposal discarded: %s", exc)
        return None
    return tuple(sorted(idx))


def refine(
    c: Checklist,
    pool: RulePool,
    d_val: Dataset,
    stats: FeatureStats | None = None,
    steps: int = 10,
    M: int | None = None,
    *,
    mode: str = "offline",
    client=None,
    scorer: SubsetScorer | None = None,
) -> Checklist:
    """Bounded inclusion/exclusion search within the pool; never returns a worse checklist.

    Offline mode takes the best single add, drop or swap per step and stops at
    a local optimum.  Agent mode asks the refinement prompt for each step.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if steps == 0:
        return c
    M = M or max(c.size, 1)
    sc = scorer or SubsetScorer(pool, d_val, stats)
    start = sc.indices(c.rules)
    best = _Best()
    best.offer(start, sc.auc(start), "input")
    cur = tuple(sorted(start))
    for _ in range(steps):
        if mode == "offline":
            nxt = _offline_step(sc, cur, M)
            if nxt is None:
                break
        elif mode == "agent":
            if client is None:
                raise ValueError("agent refinement needs a client")
            nxt = _agent_step(sc, c, cur, M, client)
            if nxt is None:
                continue
        else:
            raise ValueError(f"unknown refinement mode {mode!r}")
        best.offer(nxt, sc.auc(nxt), f"refine-{mode}")
        cur = nxt
    if best.idx == start:
        return c
    rules = tuple(sc.rules[i] for i in best.idx)
    prov = dict(c.provenance)
    prov.update(
        val_auroc=best.auc,
        subsets_evaluated=sc.evaluated,
        trace=list(prov.get("trace", [])) + best.trace[1:],
    )
    return replace(c, rules=rules, threshold=None, provenance=prov)


def finalize(
    c: Checklist,
    d_val: Dataset,
    stats: FeatureStats | None = None,
    objective: str = "youden",
    spec_floor: float = 0.8,
) -> tuple[Checklist, EvalReport]:
    """Fix the decision threshold K on the validation split."""
    if d_val.split != VALIDATION:
        raise SplitViolation(f"threshold selection reads only the validation split, got {d_val.split!r}")
    s = np.zeros(d_val.n, dtype=np.int64)
    for r in c.rules:
        s += rule_truth(r, d_val, stats or c.stats)
    K, rep = select_threshold(s, d_val.y, objective, max_score=c.size, spec_floor=spec_floor)
    return replace(c, threshold=K, stats=stats or c.stats), rep


# ---------------------------------------------------------------------------
# checklist card
# ---------------------------------------------------------------------------

def resolve_rule(rule: Rule, stats: FeatureStats | None) -> dict:
    """Rule JSON with quantile and z-score cut-points replaced by fixed numeric thresholds."""
    if isinstance(rule, Logical):
        return {"type": "logical", "op": rule.op, "rules": [resolve_rule(r, stats) for r in rule.rules]}
    if stats is not None and isinstance(rule, (QuantileThreshold, ZScoreThreshold)) and stats.has_numeric(rule.feature):
        if isinstance(rule, QuantileThreshold):
            cut = stats.quantile(rule.feature, rule.q)
        else:
            cut = stats.mean(rule.feature) + rule.z * stats.std(rule.feature)
        return {"type": "numeric_threshold", "feature": rule.feature, "op": rule.op, "threshold": cut}
    return rule_to_obj(rule)


def _cell(text: str) -> str:
    return text.replace("|", "\\|")


def _card(name: str, description: str, texts: Sequence[str], threshold: int | None) -> str:
    M = len(texts)
    lines = [f"### {name} (N-of-{M})", ""]
    if description:
        lines += [description, ""]
    lines += ["| Checklist rule (satisfied?) | Points |", "|---|:---:|"]
    lines += [f"| {_cell(t)} | +1 |" for t in texts]
    lines.append(f"| **Total score** | **0–{M}** |")
    K = "?" if threshold is None else threshold
    lines.append(f"| **High-risk threshold** | **S(x) ≥ {K}** |")
    return "\n".join(lines) + "\n"


def render_card(c: Checklist) -> str:
    """Markdown checklist card: one +1 row per rule, total range, threshold line."""
    return _card(c.name, c.description, [rule_text(r, c.stats) for r in c.rules], c.threshold)


def card_from_json(payload: Mapping) -> str:
    """Markdown card rebuilt from its JSON twin (no statistics needed)."""
    return _card(payload["name"], payload["description"], [r["text"] for r in payload["rules"]], payload["threshold"])


def card_json(c: Checklist) -> str:
    payload = {
        "name": c.name,
        "description": c.description,
        "rules": [
            {"rule": rule_to_obj(r), "text": rule_text(r, c.stats), "resolved": resolve_rule(r, c.stats), "points": 1}
            for r in c.rules
        ],
        "total_range": [0, c.size],
        "threshold": c.threshold,
    }
    return json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n"
